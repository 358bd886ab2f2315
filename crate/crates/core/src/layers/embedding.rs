use rand::Rng;

use super::params::{uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Learned vector per marker class.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub num_classes: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, num_classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (num_classes as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[num_classes, dim], bound));
        EmbeddingTable { weight, num_classes, dim }
    }

    /// Returns `[indices.len() x dim]`; `None` entries map to zero rows.
    pub fn lookup(&self, g: &mut Graph, params: &Binding, indices: &[Option<usize>]) -> Result<Var> {
        g.lookup(params.var(self.weight), indices)
    }
}
