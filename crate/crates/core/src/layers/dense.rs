use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Tanh,
    Sigmoid,
    Softmax,
}

/// Fully connected layer `y = act(x W + b)`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound));
        DenseLayer { weight, bias, activation, in_dim, out_dim }
    }

    /// `x` is `[N x in_dim]`.
    pub fn forward(&self, g: &mut Graph, params: &Binding, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("dense", format!("expected [N x {}], got {shape:?}", self.in_dim)));
        }
        let z = g.matmul(x, params.var(self.weight))?;
        let z = g.add(z, params.var(self.bias))?;
        match self.activation {
            Activation::None => Ok(z),
            Activation::Tanh => g.tanh(z),
            Activation::Sigmoid => g.sigmoid(z),
            Activation::Softmax => g.softmax(z),
        }
    }
}
