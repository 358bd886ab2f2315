use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};

/// Adam with bias correction over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: &[ParamId], lr: f64) -> Self {
        let zeros: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, ids: ids.to_vec(), m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[k]` belongs to `ids()[k]`; every entry must be present.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), self.ids.len())));
        }
        for (k, g) in grads.iter().enumerate() {
            match g {
                None => return Err(Error::MissingGradient(store.name(self.ids[k]).to_string())),
                Some(g) if g.shape() != store.get(self.ids[k]).shape() => {
                    return Err(Error::shape("adam", format!("gradient for `{}` has shape {:?}", store.name(self.ids[k]), g.shape())))
                }
                _ => {}
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for (k, g) in grads.iter().enumerate() {
            let g = g.as_ref().expect("checked above");
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let w = store.get_mut(self.ids[k]).data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data()[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data()[i] * g.data()[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
