//! Independent oracles and experiment fixtures shared by the integration
//! tests. Nothing in this module calls the code paths it is used to check;
//! fixtures that drive the library live in `scenarios`.

#![allow(dead_code)]

use std::path::Path;

use fedivon::experiment::{read_metrics, run_experiment, ExperimentConfig, RunOptions};
use fedivon::{MetricsRecord, ParamVector};
use proptest::test_runner::{Config, RngSeed};

pub mod scenarios;

/// Proptest settings with a fixed seed and no regression files, so every
/// run checks the same cases.
pub fn fixed_cases(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Scalar optimizer state for the line-by-line transcription below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarState {
    pub m: f64,
    pub h: f64,
    pub g: f64,
    pub e: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub lr: f64,
}

/// One optimizer step written out exactly as the algorithm listing reads,
/// one line per statement.
pub fn scalar_step(s: ScalarState, hp: ScalarHyper, g_hat: f64, h_hat: f64) -> ScalarState {
    let e = s.e + 1;
    let g = hp.beta1 * s.g + (1.0 - hp.beta1) * g_hat;
    let mut h = hp.beta2 * s.h
        + (1.0 - hp.beta2) * h_hat
        + 0.5 * (1.0 - hp.beta2) * (1.0 - hp.beta2) * (s.h - h_hat) * (s.h - h_hat) / (s.h + hp.delta);
    if h < 0.0 {
        h = 0.0;
    }
    let g_bar = g / (1.0 - hp.beta1.powi(e as i32));
    let m = s.m - hp.lr * (g_bar + hp.delta * s.m) / (h + hp.delta);
    ScalarState { m, h, g, e }
}

/// Product-of-Gaussians fusion evaluated directly from its definition:
/// `h̃ = Σ w h`, `m̃ = Σ w h m / h̃`, `w = N / ΣN`.
pub fn fused(means: &[f64], hs: &[f64], counts: &[usize]) -> (f64, f64) {
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    let mut h = 0.0;
    let mut hm = 0.0;
    for ((m, hk), n) in means.iter().zip(hs).zip(counts) {
        let w = *n as f64 / total;
        h += w * hk;
        hm += w * hk * m;
    }
    (hm / h, h)
}

/// `Σ_k w_k log N(x | m_k, 1/h_k)` for a scalar `x`.
pub fn weighted_log_density(x: f64, means: &[f64], hs: &[f64], counts: &[usize]) -> f64 {
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    means
        .iter()
        .zip(hs)
        .zip(counts)
        .map(|((m, h), n)| {
            let w = *n as f64 / total;
            w * (0.5 * (h / std::f64::consts::TAU).ln() - 0.5 * h * (x - m) * (x - m))
        })
        .sum()
}

/// Exact AUROC by enumerating every (positive, negative) pair; ties count
/// one half.
pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Ridge regression `L(θ) = (1/2N) Σ (y_i − x_i·θ)²` with prior precision
/// `λδ`. The Gaussian posterior for likelihood `exp(−λL)` has mean
/// `(A + δI)⁻¹ b` with `A = XᵀX/N`, `b = Xᵀy/N`, and the mean-field
/// curvature that IVON tracks is `diag(A)`.
pub struct Ridge {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
}

impl Ridge {
    pub fn fixture() -> Self {
        let xs = [
            [1.0, 0.5, -0.2],
            [0.3, -1.2, 0.8],
            [-0.7, 0.4, 1.5],
            [1.1, 0.9, 0.1],
            [0.2, -0.3, -1.0],
            [-1.4, 0.6, 0.4],
        ];
        let ys = [0.9, -1.1, 1.3, 2.0, -0.6, -0.2];
        let n = xs.len() as f64;
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for (x, y) in xs.iter().zip(ys) {
            for i in 0..3 {
                b[i] += x[i] * y / n;
                for j in 0..3 {
                    a[i][j] += x[i] * x[j] / n;
                }
            }
        }
        Self { a, b }
    }

    pub fn grad(&self, theta: &ParamVector) -> ParamVector {
        (0..3)
            .map(|i| (0..3).map(|j| self.a[i][j] * theta[j]).sum::<f64>() - self.b[i])
            .collect::<Vec<_>>()
            .into()
    }

    /// Solves `(A + δI) m = b` by Cramer's rule.
    pub fn posterior_mean(&self, delta: f64) -> [f64; 3] {
        let mut k = self.a;
        (0..3).for_each(|i| k[i][i] += delta);
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&k);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut kc = k;
            (0..3).for_each(|r| kc[r][c] = self.b[r]);
            *o = det(&kc) / d;
        }
        out
    }
}

/// Runs a TOML experiment into `out` under `seed` and returns its metrics.
pub fn run_toml(toml: &str, seed: u64, out: &Path) -> Vec<MetricsRecord> {
    let cfg = ExperimentConfig::from_toml_str(toml).expect("fixture config parses");
    let opts = RunOptions {
        seed: Some(seed),
        parallel: None,
        output_dir: Some(out.to_path_buf()),
        resume: false,
    };
    let report = run_experiment(&cfg, &opts).expect("fixture experiment runs");
    let dir = &report.run_dirs[0];
    read_metrics(&dir.join("metrics.jsonl"), None).expect("metrics stream parses")
}

/// The final-round record with the given split and sample count.
pub fn final_record<'a>(records: &'a [MetricsRecord], split: &str, mc_samples: usize) -> &'a MetricsRecord {
    let last = records.iter().map(|r| r.round).max().expect("at least one evaluation");
    records
        .iter()
        .find(|r| r.round == last && r.split == split && r.mc_samples == mc_samples)
        .unwrap_or_else(|| panic!("no {split} record with {mc_samples} samples in round {last}"))
}

/// 20 clients with two label shards each on ten 20-dimensional blobs.
pub fn shard_skew_config(algorithm: &str) -> String {
    format!(
        r#"name = "{algorithm}"

[federation]
n_clients = 20
rounds = 100
algorithm = "{algorithm}"

[model]
hidden = [32]

[ivon]
ess = "dataset"
epochs = 10

[data]
source = "blobs"
n_classes = 10
n_per_class = 60
test_per_class = 100
dim = 20
separation = 4.0

[partition]
scheme = "shard"
shards_per_client = 2

[metrics]
mc_test_samples = 64
"#
    )
}

/// In-distribution blobs plus held-out clusters at a fixed distance from
/// every class center.
pub const OOD_CONFIG: &str = r#"name = "ood"
mode = "ood"

[federation]
n_clients = 20
rounds = 20

[model]
hidden = [32]

[ivon]
ess = "dataset"

[data]
source = "blobs"
n_classes = 10
n_per_class = 60
test_per_class = 100
dim = 20
separation = 8.0

[ood]
n_clusters = 5
n_per_cluster = 100
distance = 8.0

[partition]
scheme = "iid"

[metrics]
mc_test_samples = 64
"#;

/// Personalized training on a 20-client, two-classes-per-client split.
pub fn class_skew_config(algorithm: &str, beta: f64, rounds: usize) -> String {
    format!(
        r#"name = "pfl"
mode = "personalized"

[federation]
n_clients = 20
rounds = {rounds}
algorithm = "{algorithm}"
beta = {beta:?}

[model]
hidden = [32]

[ivon]
ess = "dataset"

[data]
source = "blobs"
n_classes = 10
n_per_class = 60
test_per_class = 100
dim = 10
separation = 4.0

[partition]
scheme = "class_skew"
classes_per_client = 2

[metrics]
mc_test_samples = 0
"#
    )
}
