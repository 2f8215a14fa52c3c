use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Floor applied to every `h + δ` denominator. Only reachable when the
/// regularizer vanishes (personalization strength zero) and `h` hits zero.
pub const MIN_PRECISION: f64 = 1e-10;

/// Re-anchored regularizer used by personalized training: the isotropic
/// weight decay `δ·m` is replaced by `precision ⊙ (m − mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAnchor {
    pub mean: ParamVector,
    pub precision: ParamVector,
}

/// Diagonal Gaussian `N(mean, 1 / (ess · (hessian + δ)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mean: ParamVector,
    pub hessian: ParamVector,
    pub ess: f64,
    pub weight_decay: f64,
    pub anchor: Option<PriorAnchor>,
}

impl VariationalPosterior {
    pub fn new(mean: ParamVector, hessian: ParamVector, ess: f64, weight_decay: f64) -> Result<Self> {
        let post = Self {
            mean,
            hessian,
            ess,
            weight_decay,
            anchor: None,
        };
        post.validate()?;
        Ok(post)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.mean.len();
        if self.hessian.len() != p {
            return Err(Error::Shape(format!(
                "mean has {p} entries, hessian {}",
                self.hessian.len()
            )));
        }
        if !(self.ess > 0.0 && self.ess.is_finite()) {
            return Err(Error::InvalidArgument(format!("ess must be positive, got {}", self.ess)));
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be positive, got {}",
                self.weight_decay
            )));
        }
        if let Some(i) = self.mean.first_non_finite() {
            return Err(Error::NonFiniteUpdate { index: i });
        }
        if let Some(i) = self.hessian.iter().position(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err(Error::NegativeCurvature {
                index: i,
                value: self.hessian[i],
            });
        }
        if let Some(a) = &self.anchor {
            if a.mean.len() != p || a.precision.len() != p {
                return Err(Error::Shape("prior anchor shape differs from posterior".into()));
            }
        }
        Ok(())
    }

    /// The precision offset added to `h` at coordinate `j`: `δ`, or the
    /// anchored `δ_p,j` under personalization.
    #[inline]
    pub fn reg_precision(&self, j: usize) -> f64 {
        match &self.anchor {
            Some(a) => a.precision[j],
            None => self.weight_decay,
        }
    }

    /// Gradient of the regularizer at the current mean, coordinate `j`.
    #[inline]
    pub(crate) fn reg_grad(&self, j: usize) -> f64 {
        match &self.anchor {
            Some(a) => a.precision[j] * (self.mean[j] - a.mean[j]),
            None => self.weight_decay * self.mean[j],
        }
    }

    #[inline]
    pub(crate) fn denom(&self, j: usize, h: f64) -> f64 {
        (h + self.reg_precision(j)).max(MIN_PRECISION)
    }

    /// `σ²_j = 1 / (λ (h_j + δ))`.
    pub fn sigma_sq(&self) -> Vec<f64> {
        (0..self.len())
            .map(|j| 1.0 / (self.ess * self.denom(j, self.hessian[j])))
            .collect()
    }

    /// Draws `θ = m + σ ⊙ ε` with `ε` standard normal from `rng`.
    pub fn sample_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let sigma_sq = self.sigma_sq();
        self.sample_with(&sigma_sq, rng)
    }

    pub(crate) fn sample_with<R: Rng + ?Sized>(&self, sigma_sq: &[f64], rng: &mut R) -> ParamVector {
        self.mean
            .iter()
            .zip(sigma_sq)
            .map(|(m, s2)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s2.sqrt() * eps
            })
            .collect::<Vec<_>>()
            .into()
    }

    pub fn to_record(&self) -> PosteriorRecord {
        PosteriorRecord {
            dtype: DTYPE.to_string(),
            len: self.len(),
            mean: self.mean.clone(),
            hessian: self.hessian.clone(),
            ess: self.ess,
            weight_decay: self.weight_decay,
            anchor: self.anchor.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_record()).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: PosteriorRecord =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        rec.into_posterior()
    }
}

/// `ĥ_j = ĝ_j (θ_j − m_j) / σ²_j`. Individual entries may be negative.
pub fn hessian_estimate(grad_hat: &ParamVector, theta: &ParamVector, post: &VariationalPosterior) -> Result<ParamVector> {
    let p = post.len();
    if grad_hat.len() != p || theta.len() != p {
        return Err(Error::Shape(format!(
            "gradient {} / sample {} / posterior {p}",
            grad_hat.len(),
            theta.len()
        )));
    }
    let sigma_sq = post.sigma_sq();
    Ok(hessian_estimate_with(grad_hat, theta, &post.mean, &sigma_sq))
}

pub(crate) fn hessian_estimate_with(
    grad_hat: &ParamVector,
    theta: &ParamVector,
    mean: &ParamVector,
    sigma_sq: &[f64],
) -> ParamVector {
    grad_hat
        .iter()
        .zip(theta.iter())
        .zip(mean.iter())
        .zip(sigma_sq)
        .map(|(((g, t), m), s2)| g * (t - m) / s2)
        .collect::<Vec<_>>()
        .into()
}

const DTYPE: &str = "f64";

/// On-disk form of a posterior: explicit length and dtype alongside the
/// arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorRecord {
    pub dtype: String,
    pub len: usize,
    pub mean: ParamVector,
    pub hessian: ParamVector,
    pub ess: f64,
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<PriorAnchor>,
}

impl PosteriorRecord {
    pub fn into_posterior(self) -> Result<VariationalPosterior> {
        if self.dtype != DTYPE {
            return Err(Error::Serde(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.mean.len() != self.len || self.hessian.len() != self.len {
            return Err(Error::Serde(format!(
                "declared length {} but arrays have {} and {} entries",
                self.len,
                self.mean.len(),
                self.hessian.len()
            )));
        }
        let post = VariationalPosterior {
            mean: self.mean,
            hessian: self.hessian,
            ess: self.ess,
            weight_decay: self.weight_decay,
            anchor: self.anchor,
        };
        post.validate()?;
        Ok(post)
    }
}
