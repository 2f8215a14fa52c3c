//! Round-based federated training: client sampling, broadcast, local fits,
//! aggregation and periodic evaluation, with a personalized variant that
//! keeps one posterior per client.

mod engine;
mod history;

pub use engine::{run_federation, run_personalized, ClientHandle, EvalData, Federation, FederationOutcome};
pub use history::{Checkpoint, RoundHistory, RoundRecord};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::baseline::Optimizer;
use crate::error::{Error, Result};
use crate::ivon::IvonConfig;
use crate::nn::ModelSpec;
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedivon,
    Fedavg,
    LocalOnly,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedivon => "fedivon",
            Algorithm::Fedavg => "fedavg",
            Algorithm::LocalOnly => "local_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fedivon" => Some(Algorithm::Fedivon),
            "fedavg" => Some(Algorithm::Fedavg),
            "local_only" => Some(Algorithm::LocalOnly),
            _ => None,
        }
    }
}

/// Local optimizer settings for FedAvg clients. Batch size, epochs, weight
/// decay and gradient clipping are shared with the IVON settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub optimizer: Optimizer,
    pub lr_initial: f64,
    pub lr_final: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            lr_initial: 0.1,
            lr_final: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Weight draws for Monte Carlo prediction; the posterior-mean
    /// prediction is always evaluated as well.
    pub mc_samples: usize,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: 500,
            ece_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub participation_fraction: f64,
    pub algorithm: Algorithm,
    /// Personalization strength β; `Some` switches FedIvon to personalized
    /// training with per-client posteriors.
    pub personalization: Option<f64>,
    pub ivon: IvonConfig,
    pub baseline: BaselineConfig,
    pub model: ModelSpec,
    pub eval_every: usize,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Worker threads for client updates; results do not depend on it.
    pub parallel: usize,
}

impl FederationConfig {
    pub fn new(model: ModelSpec, n_clients: usize, rounds: usize) -> Self {
        Self {
            n_clients,
            rounds,
            participation_fraction: 1.0,
            algorithm: Algorithm::Fedivon,
            personalization: None,
            ivon: IvonConfig::default(),
            baseline: BaselineConfig::default(),
            model,
            eval_every: 1,
            eval: EvalConfig::default(),
            seed: 0,
            parallel: 1,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_clients == 0 {
            out.push("n_clients must be at least 1".into());
        }
        let f = self.participation_fraction;
        if !(f > 0.0 && f <= 1.0) {
            out.push(format!("participation_fraction must be in (0, 1], got {f}"));
        }
        if let Some(beta) = self.personalization {
            if !(beta >= 0.0 && beta.is_finite()) {
                out.push(format!("personalization beta must be nonnegative, got {beta}"));
            }
            if self.algorithm == Algorithm::Fedavg {
                out.push("personalization is only defined for fedivon".into());
            }
        }
        if self.eval_every == 0 {
            out.push("eval_every must be positive".into());
        }
        if self.eval.ece_bins == 0 {
            out.push("ece_bins must be positive".into());
        }
        if self.parallel == 0 {
            out.push("parallel must be at least 1".into());
        }
        out.extend(self.ivon.problems().into_iter().map(|p| format!("ivon: {p}")));
        if !(self.baseline.lr_initial > 0.0 && self.baseline.lr_final > 0.0)
            || self.baseline.lr_final > self.baseline.lr_initial
        {
            out.push("baseline learning rates must be positive with lr_final <= lr_initial".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Whether clients keep personalized posteriors across rounds.
    pub fn is_personalized(&self) -> bool {
        self.algorithm == Algorithm::LocalOnly || self.personalization.is_some()
    }
}

/// Number of clients drawn per round: `max(1, round(fraction · K))`.
pub fn clients_per_round(n_clients: usize, fraction: f64) -> usize {
    ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients.max(1))
}

/// Uniform sample without replacement, sorted ascending; deterministic per
/// `(seed, round)`.
pub fn sample_clients(n_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    if n_clients == 0 {
        return Vec::new();
    }
    let k = clients_per_round(n_clients, fraction);
    if k == n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = seed::stream(seed, Purpose::ClientSampling, &[round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Seed of client `client`'s local fit in round `round`.
pub fn client_seed(root: u64, round: usize, client: usize) -> u64 {
    seed::derive(root, Purpose::ClientTraining, &[round as u64, client as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn full_participation_takes_everyone() {
        assert_eq!(sample_clients(7, 1.0, 3, 1), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn five_percent_of_two_hundred() {
        let ids = sample_clients(200, 0.05, 0, 42);
        assert_eq!(ids.len(), 10);
        let mut dedup = ids.clone();
        dedup.dedup();
        assert_eq!(dedup, ids);
        assert!(ids.iter().all(|&i| i < 200));
    }

    #[test]
    fn sampling_is_deterministic_per_round() {
        assert_eq!(sample_clients(50, 0.2, 4, 9), sample_clients(50, 0.2, 4, 9));
        assert_ne!(sample_clients(50, 0.2, 4, 9), sample_clients(50, 0.2, 5, 9));
    }

    #[test]
    fn at_least_one_client() {
        assert_eq!(clients_per_round(10, 0.01), 1);
        assert_eq!(sample_clients(10, 0.01, 0, 0).len(), 1);
    }

    #[test]
    fn config_problems_name_fields() {
        let spec = ModelSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let mut cfg = FederationConfig::new(spec, 4, 2);
        assert!(cfg.validate().is_ok());
        cfg.participation_fraction = 1.5;
        cfg.eval_every = 0;
        let problems = cfg.problems();
        assert_eq!(problems.len(), 2);
        assert!(problems[0].contains("participation_fraction"));
    }
}
