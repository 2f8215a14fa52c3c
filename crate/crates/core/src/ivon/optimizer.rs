use serde::{Deserialize, Serialize};

use super::posterior::VariationalPosterior;
use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// How the effective sample size `λ` is chosen for a local fit.
///
/// Serialized as a number, or as the string `"dataset"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ess {
    /// A fixed value, independent of the local dataset.
    Fixed(f64),
    /// `λ = |D|` of the dataset being fit.
    DatasetSize,
}

impl Serialize for Ess {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ess::Fixed(v) => s.serialize_f64(*v),
            Ess::DatasetSize => s.serialize_str("dataset"),
        }
    }
}

impl<'de> Deserialize<'de> for Ess {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Ess::Fixed(v as f64)),
            Raw::Num(v) => Ok(Ess::Fixed(v)),
            Raw::Text(t) if t == "dataset" => Ok(Ess::DatasetSize),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected \"dataset\" or a number, got {t:?}"
            ))),
        }
    }
}

impl Ess {
    pub fn resolve(self, n_examples: usize) -> f64 {
        match self {
            Ess::Fixed(v) => v,
            Ess::DatasetSize => n_examples as f64,
        }
    }
}

/// IVON hyperparameters. Defaults follow the learning-rate, weight-decay,
/// batch-size and sampling settings used for the standard FL experiments,
/// with `λ = |D|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvonConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub ess: Ess,
    pub h_init: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_mc_samples: usize,
    pub clip_grad_norm: Option<f64>,
}

impl Default for IvonConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99999,
            lr_initial: 0.1,
            lr_final: 0.01,
            weight_decay: 2e-4,
            ess: Ess::DatasetSize,
            h_init: 1.0,
            batch_size: 32,
            epochs: 2,
            train_mc_samples: 1,
            clip_grad_norm: None,
        }
    }
}

impl IvonConfig {
    /// Returns every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..1.0).contains(&self.beta1) {
            out.push(format!("beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            out.push(format!("beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.lr_initial > 0.0) {
            out.push(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_final > 0.0) {
            out.push(format!("lr_final must be positive, got {}", self.lr_final));
        }
        if self.lr_final > self.lr_initial {
            out.push(format!(
                "lr_final ({}) must not exceed lr_initial ({})",
                self.lr_final, self.lr_initial
            ));
        }
        if !(self.weight_decay > 0.0) {
            out.push(format!("weight_decay must be positive, got {}", self.weight_decay));
        }
        if let Ess::Fixed(v) = self.ess {
            if !(v > 0.0) {
                out.push(format!("ess must be positive, got {v}"));
            }
        }
        if !(self.h_init >= 0.0) {
            out.push(format!("h_init must be nonnegative, got {}", self.h_init));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if self.train_mc_samples == 0 {
            out.push("train_mc_samples must be positive".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                out.push(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Linear decay from `initial` to `last` over `steps` steps.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    initial: f64,
    last: f64,
    steps: usize,
}

impl LinearSchedule {
    pub fn new(initial: f64, last: f64, steps: usize) -> Self {
        Self { initial, last, steps }
    }

    pub fn at(&self, t: usize) -> f64 {
        if self.steps <= 1 {
            return self.initial;
        }
        let frac = t.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.initial + (self.last - self.initial) * frac
    }
}

/// Optimizer state for one local fit.
#[derive(Debug, Clone)]
pub struct IvonState {
    pub posterior: VariationalPosterior,
    pub momentum: ParamVector,
    pub step: u64,
    pub config: IvonConfig,
}

impl IvonState {
    /// Fresh state with zero momentum and step counter.
    pub fn new(posterior: VariationalPosterior, config: IvonConfig) -> Self {
        let momentum = ParamVector::zeros(posterior.len());
        Self {
            posterior,
            momentum,
            step: 0,
            config,
        }
    }

    /// Applies one IVON update given a gradient estimate `ĝ` and Hessian
    /// estimate `ĥ`. On error the state is left untouched.
    pub fn step(&mut self, grad_hat: &ParamVector, h_hat: &ParamVector, lr: f64) -> Result<()> {
        let p = self.posterior.len();
        if grad_hat.len() != p || h_hat.len() != p {
            return Err(Error::Shape(format!(
                "gradient {} / hessian estimate {} / posterior {p}",
                grad_hat.len(),
                h_hat.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let beta1 = self.config.beta1;
        let beta2 = self.config.beta2;
        let rho = 1.0 - beta2;
        let e = self.step + 1;
        let debias = 1.0 - beta1.powi(e as i32);

        let mut g_new = vec![0.0; p];
        let mut h_new = vec![0.0; p];
        let mut m_new = vec![0.0; p];
        let post = &self.posterior;
        for j in 0..p {
            let g = beta1 * self.momentum[j] + (1.0 - beta1) * grad_hat[j];
            let h = post.hessian[j];
            let diff = h - h_hat[j];
            let h_next = (beta2 * h + rho * h_hat[j] + 0.5 * rho * rho * diff * diff / post.denom(j, h)).max(0.0);
            let g_bar = g / debias;
            let m = post.mean[j] - lr * (g_bar + post.reg_grad(j)) / post.denom(j, h_next);
            if !(g.is_finite() && h_next.is_finite() && m.is_finite()) {
                return Err(Error::NonFiniteUpdate { index: j });
            }
            g_new[j] = g;
            h_new[j] = h_next;
            m_new[j] = m;
        }
        self.momentum = g_new.into();
        self.posterior.hessian = h_new.into();
        self.posterior.mean = m_new.into();
        self.step = e;
        Ok(())
    }
}

/// Free-function form of [`IvonState::step`].
pub fn ivon_step(state: &mut IvonState, grad_hat: &ParamVector, h_hat: &ParamVector, lr: f64) -> Result<()> {
    state.step(grad_hat, h_hat, lr)
}
