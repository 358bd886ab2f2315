//! Central finite-difference checking of [`Graph::backward`].
//!
//! Only forward evaluations are used to build the numeric estimate, so the
//! check stays independent of the backward rules it verifies.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Largest observed discrepancy between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_abs_error: f64,
    /// Relative error of the entry that exceeded the absolute floor by the most.
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    /// Entries under the absolute floor given to [`check_gradients`] are
    /// exempt; every other entry must be within `rel_tol`.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

fn loss_value(params: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares `backward` against central differences with the given `step`
/// for every entry of every parameter.
pub fn check_gradients(
    params: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    step: f64,
    abs_floor: f64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheck::default();
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = loss_value(&work, &f)?;
            work[pi].data_mut()[k] = orig - step;
            let down = loss_value(&work, &f)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > abs_floor {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
