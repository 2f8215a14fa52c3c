//! Server-side fusion of client posteriors.
//!
//! Client posteriors are diagonal Gaussians whose precision is carried by
//! the curvature vector `h`. Fusing them as a weighted product of Gaussians
//! gives, per coordinate,
//!
//! ```text
//! w_k = N_k / Σ N_k
//! h̃   = Σ w_k h_k
//! m̃   = Σ w_k h_k m_k / h̃
//! ```
//!
//! Sums are evaluated relative to the first contribution
//! (`m̃ = m_1 + Σ π_k (m_k − m_1)` with `π_k = w_k h_k / h̃`), which is
//! algebraically identical and makes a single contribution, or several
//! identical ones, pass through bit-exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ModelSpec, ParamVector};

/// What a client sends to the server: its posterior mean, curvature and
/// local example count. Nothing else about the client is visible here.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientContribution {
    pub mean: ParamVector,
    pub hessian: ParamVector,
    pub n_examples: usize,
}

/// The aggregated `(m̃, h̃)` broadcast to clients each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub mean: ParamVector,
    pub hessian: ParamVector,
}

impl GlobalModel {
    /// Fresh model: initialized weights and constant curvature `h_init`.
    pub fn initial(spec: &ModelSpec, seed: u64, h_init: f64) -> Self {
        let mean = nn::init_params(spec, seed);
        let hessian = ParamVector::filled(mean.len(), h_init);
        Self { mean, hessian }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

fn weights(counts: impl Iterator<Item = usize>) -> Result<Vec<f64>> {
    let counts: Vec<usize> = counts.collect();
    if counts.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("client contributed zero examples".into()));
    }
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    Ok(counts.iter().map(|&n| n as f64 / total).collect())
}

fn check_shapes<'a>(p: usize, vecs: impl Iterator<Item = &'a ParamVector>) -> Result<()> {
    for (k, v) in vecs.enumerate() {
        if v.len() != p {
            return Err(Error::Shape(format!("contribution {k} has {} entries, expected {p}", v.len())));
        }
    }
    Ok(())
}

/// Precision-weighted product-of-Gaussians fusion. Coordinates where every
/// client reports zero curvature fall back to the `w`-weighted mean.
pub fn aggregate(contribs: &[ClientContribution]) -> Result<GlobalModel> {
    let w = weights(contribs.iter().map(|c| c.n_examples))?;
    let first = &contribs[0];
    let p = first.mean.len();
    check_shapes(p, contribs.iter().flat_map(|c| [&c.mean, &c.hessian]))?;
    if let Some((k, j)) = contribs.iter().enumerate().find_map(|(k, c)| {
        c.hessian.iter().position(|h| !(*h >= 0.0)).map(|j| (k, j))
    }) {
        return Err(Error::NegativeCurvature {
            index: j,
            value: contribs[k].hessian[j],
        });
    }

    let mut mean = vec![0.0; p];
    let mut hessian = vec![0.0; p];
    for j in 0..p {
        let h0 = first.hessian[j];
        let m0 = first.mean[j];
        let h_sum = h0
            + contribs
                .iter()
                .zip(&w)
                .skip(1)
                .map(|(c, wk)| wk * (c.hessian[j] - h0))
                .sum::<f64>();
        let h_tilde = h_sum.max(0.0);
        let shift: f64 = if h_tilde > 0.0 {
            contribs
                .iter()
                .zip(&w)
                .skip(1)
                .map(|(c, wk)| (wk * c.hessian[j] / h_tilde) * (c.mean[j] - m0))
                .sum()
        } else {
            contribs
                .iter()
                .zip(&w)
                .skip(1)
                .map(|(c, wk)| wk * (c.mean[j] - m0))
                .sum()
        };
        hessian[j] = h_tilde;
        mean[j] = m0 + shift;
        if !mean[j].is_finite() {
            return Err(Error::NonFiniteUpdate { index: j });
        }
    }
    Ok(GlobalModel {
        mean: mean.into(),
        hessian: hessian.into(),
    })
}

/// FedAvg: `m̃ = Σ w_k m_k`.
pub fn fedavg_aggregate(means: &[(ParamVector, usize)]) -> Result<ParamVector> {
    let w = weights(means.iter().map(|(_, n)| *n))?;
    let first = &means[0].0;
    let p = first.len();
    check_shapes(p, means.iter().map(|(m, _)| m))?;
    let out: Vec<f64> = (0..p)
        .map(|j| {
            let m0 = first[j];
            m0 + means
                .iter()
                .zip(&w)
                .skip(1)
                .map(|((m, _), wk)| wk * (m[j] - m0))
                .sum::<f64>()
        })
        .collect();
    Ok(out.into())
}

fn log_normal(x: f64, mean: f64, precision: f64) -> f64 {
    0.5 * (precision.ln() - std::f64::consts::TAU.ln()) - 0.5 * precision * (x - mean) * (x - mean)
}

/// `Σ_k w_k log q_k(point)`, with `q_k` the Gaussian of precision `h_k`.
pub fn weighted_log_density(contribs: &[ClientContribution], point: &ParamVector) -> Result<f64> {
    let w = weights(contribs.iter().map(|c| c.n_examples))?;
    let p = point.len();
    check_shapes(p, contribs.iter().flat_map(|c| [&c.mean, &c.hessian]))?;
    Ok(contribs
        .iter()
        .zip(&w)
        .map(|(c, wk)| {
            wk * (0..p)
                .map(|j| log_normal(point[j], c.mean[j], c.hessian[j]))
                .sum::<f64>()
        })
        .sum())
}

/// `Σ_k w_k log q_k(point) − log q̃(point)` where `q̃` is the aggregate.
/// The product-of-Gaussians identity makes this constant in `point`.
/// Requires strictly positive curvature.
pub fn product_of_gaussians_density_check(contribs: &[ClientContribution], point: &ParamVector) -> Result<f64> {
    let global = aggregate(contribs)?;
    let lhs = weighted_log_density(contribs, point)?;
    let rhs: f64 = (0..point.len())
        .map(|j| log_normal(point[j], global.mean[j], global.hessian[j]))
        .sum();
    Ok(lhs - rhs)
}
