use rand::seq::SliceRandom;

use super::optimizer::{IvonConfig, IvonState, LinearSchedule};
use super::posterior::{hessian_estimate_with, PriorAnchor, VariationalPosterior};
use crate::aggregation::GlobalModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelSpec, ParamVector};
use crate::seed::{self, Purpose, Stream};

/// Prior used by personalized training: a diagonal Gaussian with mean `mean`
/// and curvature `hessian`, weighted by `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: ParamVector,
    pub hessian: ParamVector,
    pub beta: f64,
}

impl PriorSpec {
    pub fn from_global(global: &GlobalModel, beta: f64) -> Self {
        Self {
            mean: global.mean.clone(),
            hessian: global.hessian.clone(),
            beta,
        }
    }

    /// `δ_p = β (h_p + δ)`.
    pub fn anchor(&self, weight_decay: f64) -> PriorAnchor {
        PriorAnchor {
            mean: self.mean.clone(),
            precision: self
                .hessian
                .iter()
                .map(|h| self.beta * (h + weight_decay))
                .collect::<Vec<_>>()
                .into(),
        }
    }
}

/// Result of a local fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub posterior: VariationalPosterior,
    /// Mean minibatch loss over every step, `None` when no step ran.
    pub mean_loss: Option<f64>,
    pub steps: usize,
}

/// Stream used to shuffle minibatches in a fit seeded with `seed`.
pub fn shuffle_stream(seed: u64) -> Stream {
    seed::stream(seed, Purpose::Shuffle, &[])
}

/// Stream used to draw weight samples in a fit seeded with `seed`.
pub fn noise_stream(seed: u64) -> Stream {
    seed::stream(seed, Purpose::Noise, &[])
}

/// Number of optimizer steps a fit performs: `E · ⌈N / B⌉`.
pub fn steps_per_fit(n_examples: usize, config: &IvonConfig) -> usize {
    config.epochs * n_examples.div_ceil(config.batch_size)
}

/// One IVON minibatch step's estimates at posterior `post`, averaged over
/// `config.train_mc_samples` weight draws: `(loss, ĝ, ĥ)`.
pub fn estimate_step(
    spec: &ModelSpec,
    post: &VariationalPosterior,
    batch: &Batch<'_>,
    mc_samples: usize,
    noise: &mut Stream,
) -> Result<(f64, ParamVector, ParamVector)> {
    let p = post.len();
    let sigma_sq = post.sigma_sq();
    let mut loss = 0.0;
    let mut g_acc = vec![0.0; p];
    let mut h_acc = vec![0.0; p];
    for _ in 0..mc_samples {
        let theta = post.sample_with(&sigma_sq, noise);
        let (l, g) = nn::loss_and_grad(spec, &theta, batch)?;
        let h = hessian_estimate_with(&g, &theta, &post.mean, &sigma_sq);
        loss += l;
        for j in 0..p {
            g_acc[j] += g[j];
            h_acc[j] += h[j];
        }
    }
    if mc_samples > 1 {
        let s = mc_samples as f64;
        loss /= s;
        g_acc.iter_mut().for_each(|v| *v /= s);
        h_acc.iter_mut().for_each(|v| *v /= s);
    }
    Ok((loss, g_acc.into(), h_acc.into()))
}

fn clip(grad: &mut ParamVector, max_norm: f64) {
    let norm = grad.norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
    }
}

fn fit(
    spec: &ModelSpec,
    data: &Dataset,
    start: VariationalPosterior,
    config: &IvonConfig,
    seed: u64,
) -> Result<LocalFit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    if start.len() != nn::param_count(spec) {
        return Err(Error::Shape(format!(
            "posterior has {} entries, model needs {}",
            start.len(),
            nn::param_count(spec)
        )));
    }
    let n = data.len();
    let total_steps = steps_per_fit(n, config);
    let schedule = LinearSchedule::new(config.lr_initial, config.lr_final, total_steps);
    let mut state = IvonState::new(start, config.clone());
    let mut shuffle = shuffle_stream(seed);
    let mut noise = noise_stream(seed);

    let dim = data.dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut xb = Vec::with_capacity(config.batch_size * dim);
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
            let batch = Batch::new(&xb, &yb);
            let (loss, mut g_hat, h_hat) =
                estimate_step(spec, &state.posterior, &batch, config.train_mc_samples, &mut noise)?;
            if let Some(max) = config.clip_grad_norm {
                clip(&mut g_hat, max);
            }
            state.step(&g_hat, &h_hat, schedule.at(t))?;
            loss_sum += loss;
            t += 1;
        }
    }
    Ok(LocalFit {
        posterior: state.posterior,
        mean_loss: (t > 0).then(|| loss_sum / t as f64),
        steps: t,
    })
}

fn start_posterior(init: &GlobalModel, ess: f64, weight_decay: f64) -> Result<VariationalPosterior> {
    VariationalPosterior::new(init.mean.clone(), init.hessian.clone(), ess, weight_decay)
}

/// Runs IVON on a client's data starting from the broadcast `(m̃, h̃)`.
/// Momentum and the step counter start at zero.
pub fn client_update(
    spec: &ModelSpec,
    data: &Dataset,
    init: &GlobalModel,
    config: &IvonConfig,
    seed: u64,
) -> Result<LocalFit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ess = config.ess.resolve(data.len());
    fit(spec, data, start_posterior(init, ess, config.weight_decay)?, config, seed)
}

/// Personalized IVON: identical to [`client_update`] except the regularizer
/// is re-anchored at the prior, `δ m → δ_p ⊙ (m − m_p)` and `h + δ → h + δ_p`
/// with `δ_p = β (h_p + δ)`. The fit starts from `init`, typically the
/// client's previous personalized posterior.
pub fn personalized_client_update(
    spec: &ModelSpec,
    data: &Dataset,
    init: &GlobalModel,
    prior: &PriorSpec,
    config: &IvonConfig,
    seed: u64,
) -> Result<LocalFit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(prior.beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {}", prior.beta)));
    }
    if prior.mean.len() != init.len() || prior.hessian.len() != init.len() {
        return Err(Error::Shape("prior shape differs from the initial model".into()));
    }
    let ess = config.ess.resolve(data.len());
    let mut start = start_posterior(init, ess, config.weight_decay)?;
    start.anchor = Some(prior.anchor(config.weight_decay));
    fit(spec, data, start, config, seed)
}
