use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so the
/// expectation is unchanged. Identity when not training or when `rate == 0`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::new(shape, mask)?)?;
    g.mul(x, mask)
}
