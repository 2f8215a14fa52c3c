//! First-order local training for the FedAvg baseline: minibatch SGD or
//! Adam on the mean cross-entropy plus an L2 penalty, with the same linear
//! learning-rate decay and minibatch order as the IVON client fit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ivon::{shuffle_stream, LinearSchedule};
use crate::nn::{self, Batch, ModelSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderConfig {
    pub optimizer: Optimizer,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_grad_norm: Option<f64>,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            lr_initial: 0.1,
            lr_final: 0.01,
            weight_decay: 2e-4,
            batch_size: 32,
            epochs: 2,
            clip_grad_norm: None,
        }
    }
}

impl FirstOrderConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            out.push(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            out.push(format!(
                "lr_final must be positive and at most lr_initial, got {}",
                self.lr_final
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                out.push(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        out
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Result of a first-order local fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFit {
    pub params: ParamVector,
    pub mean_loss: Option<f64>,
    pub steps: usize,
}

/// Trains from `init` on `data`; deterministic given `seed`.
pub fn first_order_update(
    spec: &ModelSpec,
    data: &Dataset,
    init: &ParamVector,
    config: &FirstOrderConfig,
    seed: u64,
) -> Result<PointFit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let p = nn::param_count(spec);
    if init.len() != p {
        return Err(Error::Shape(format!("initial parameters have {} entries, model needs {p}", init.len())));
    }
    let n = data.len();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let schedule = LinearSchedule::new(config.lr_initial, config.lr_final, total);
    let mut shuffle = shuffle_stream(seed);
    let mut params = init.clone().into_inner();
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    let mut order: Vec<usize> = (0..n).collect();
    let mut xb = Vec::with_capacity(config.batch_size * data.dim());
    let mut yb = Vec::with_capacity(config.batch_size);
    let mut loss_sum = 0.0;
    let mut t = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(data.row(i));
                yb.push(data.labels()[i]);
            }
            let current: ParamVector = params.clone().into();
            let (loss, mut grad) = nn::loss_and_grad(spec, &current, &Batch::new(&xb, &yb))?;
            if let Some(max) = config.clip_grad_norm {
                let norm = grad.norm();
                if norm > max {
                    let s = max / norm;
                    grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
                }
            }
            let lr = schedule.at(t);
            t += 1;
            match config.optimizer {
                Optimizer::Sgd => {
                    for j in 0..p {
                        params[j] -= lr * (grad[j] + config.weight_decay * params[j]);
                    }
                }
                Optimizer::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    for j in 0..p {
                        let g = grad[j] + config.weight_decay * params[j];
                        m1[j] = ADAM_BETA1 * m1[j] + (1.0 - ADAM_BETA1) * g;
                        m2[j] = ADAM_BETA2 * m2[j] + (1.0 - ADAM_BETA2) * g * g;
                        params[j] -= lr * (m1[j] / bc1) / ((m2[j] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
            if let Some(j) = params.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteUpdate { index: j });
            }
            loss_sum += loss;
        }
    }
    Ok(PointFit {
        params: params.into(),
        mean_loss: (t > 0).then(|| loss_sum / t as f64),
        steps: t,
    })
}
