//! Variational Online Newton (VON) and its Gauss-Newton variant (VOGN).
//!
//! Kept as independent reference optimizers for cross-checking IVON. Both
//! use the same `h + δ` denominator convention as IVON, with step size `ρ`:
//!
//! ```text
//! h ← (1 − ρ) h + ρ ĥ
//! m ← m − ρ (ĝ + δ m) / (h + δ)
//! ```
//!
//! VON takes the raw diagonal Hessian of the loss as `ĥ`; VOGN uses the
//! mean of squared per-example gradients.

use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct VonState {
    pub mean: ParamVector,
    pub hessian: ParamVector,
    pub weight_decay: f64,
}

impl VonState {
    pub fn new(mean: ParamVector, hessian: ParamVector, weight_decay: f64) -> Self {
        Self {
            mean,
            hessian,
            weight_decay,
        }
    }

    fn apply(&mut self, grad: &ParamVector, h_hat: &ParamVector, rho: f64) -> Result<()> {
        let p = self.mean.len();
        if grad.len() != p || h_hat.len() != p || self.hessian.len() != p {
            return Err(Error::Shape("VON state and estimates differ in length".into()));
        }
        let delta = self.weight_decay;
        let h_new: Vec<f64> = (0..p)
            .map(|j| (1.0 - rho) * self.hessian[j] + rho * h_hat[j])
            .collect();
        if let Some(j) = h_new.iter().position(|&h| h < 0.0) {
            return Err(Error::NegativeCurvature {
                index: j,
                value: h_new[j],
            });
        }
        let m_new: Vec<f64> = (0..p)
            .map(|j| self.mean[j] - rho * (grad[j] + delta * self.mean[j]) / (h_new[j] + delta))
            .collect();
        if let Some(j) = m_new.iter().position(|m| !m.is_finite()) {
            return Err(Error::NonFiniteUpdate { index: j });
        }
        self.hessian = h_new.into();
        self.mean = m_new.into();
        Ok(())
    }
}

/// VON step with a caller-supplied diagonal Hessian estimate. Fails,
/// leaving the state untouched, if the updated curvature goes negative.
pub fn von_step(state: &mut VonState, grad: &ParamVector, hessian_diag: &ParamVector, rho: f64) -> Result<()> {
    state.apply(grad, hessian_diag, rho)
}

/// Gauss-Newton curvature: mean of squared per-example gradients.
pub fn vogn_hessian(per_example: &[ParamVector]) -> Result<ParamVector> {
    let first = per_example.first().ok_or(Error::EmptyDataset)?;
    let p = first.len();
    let mut acc = vec![0.0; p];
    for g in per_example {
        if g.len() != p {
            return Err(Error::Shape("per-example gradients differ in length".into()));
        }
        for (a, v) in acc.iter_mut().zip(g.iter()) {
            *a += v * v;
        }
    }
    let n = per_example.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect::<Vec<_>>().into())
}

/// VOGN step: the gradient is the mean of `per_example`, the curvature its
/// mean square.
pub fn vogn_step(state: &mut VonState, per_example: &[ParamVector], rho: f64) -> Result<()> {
    let h_hat = vogn_hessian(per_example)?;
    let n = per_example.len() as f64;
    let mut grad = vec![0.0; h_hat.len()];
    for g in per_example {
        for (a, v) in grad.iter_mut().zip(g.iter()) {
            *a += v;
        }
    }
    grad.iter_mut().for_each(|v| *v /= n);
    state.apply(&grad.into(), &h_hat, rho)
}
