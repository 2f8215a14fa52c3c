//! Predictive evaluation: Monte Carlo predictions from a posterior and the
//! scalar metrics reported for every evaluation (accuracy, NLL, ECE, Brier
//! score, predictive entropy, OOD AUROC).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ivon::VariationalPosterior;
use crate::nn::{self, ModelSpec};
use crate::seed::{self, Purpose};

/// Probability floor applied before taking logs in [`nll`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Predictive distributions (row-major `N × C`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBatch {
    probs: Vec<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl PredictiveBatch {
    pub fn new(probs: Vec<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || probs.len() != labels.len() * n_classes {
            return Err(Error::Shape(format!(
                "{} probabilities for {} labels and {n_classes} classes",
                probs.len(),
                labels.len()
            )));
        }
        for (i, row) in probs.chunks_exact(n_classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability distribution")));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Shape(format!("label {y} out of range")));
        }
        Ok(Self {
            probs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.n_classes)
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Predictive distribution of a posterior on `inputs`.
///
/// `samples == 0` evaluates the network at the posterior mean. Otherwise
/// predictions of `samples` weight draws are averaged; draw `s` uses its own
/// stream derived from `(seed, s)` and the sum runs in draw order.
pub fn mc_predict(
    posterior: &VariationalPosterior,
    spec: &ModelSpec,
    inputs: &[f64],
    labels: &[usize],
    samples: usize,
    seed: u64,
) -> Result<PredictiveBatch> {
    let c = spec.n_classes();
    if samples == 0 {
        let probs = nn::forward(spec, &posterior.mean, inputs)?;
        return PredictiveBatch::new(probs, labels.to_vec(), c);
    }
    let sigma_sq = posterior.sigma_sq();
    let mut acc: Vec<f64> = Vec::new();
    for s in 0..samples {
        let mut rng = seed::stream(seed, Purpose::McSample, &[s as u64]);
        let theta = posterior.sample_with(&sigma_sq, &mut rng);
        let probs = nn::forward(spec, &theta, inputs)?;
        if acc.is_empty() {
            acc = probs;
        } else {
            acc.iter_mut().zip(&probs).for_each(|(a, p)| *a += p);
        }
    }
    let inv = 1.0 / samples as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    PredictiveBatch::new(acc, labels.to_vec(), c)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(pred: &PredictiveBatch) -> f64 {
    let correct = pred
        .rows()
        .zip(&pred.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / pred.len() as f64
}

/// Mean negative log-probability of the true label, floored at [`PROB_FLOOR`].
pub fn nll(pred: &PredictiveBatch) -> f64 {
    let total: f64 = pred
        .rows()
        .zip(&pred.labels)
        .map(|(row, &y)| -row[y].max(PROB_FLOOR).ln())
        .sum();
    total / pred.len() as f64
}

/// Mean squared distance between the predictive row and the one-hot label.
pub fn brier(pred: &PredictiveBatch) -> f64 {
    let total: f64 = pred
        .rows()
        .zip(&pred.labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / pred.len() as f64
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Reliability-diagram decomposition over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

impl ReliabilityBins {
    /// `Σ_b (n_b / N) |acc_b − conf_b|`; empty bins contribute 0.
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n) * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }
}

/// Bins rows by max-probability confidence. A confidence on an interior
/// boundary goes to the higher bin; 1.0 goes to the last bin.
pub fn reliability_bins(pred: &PredictiveBatch, n_bins: usize) -> Result<ReliabilityBins> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (row, &y) in pred.rows().zip(&pred.labels) {
        let k = argmax(row);
        let conf = row[k];
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        conf_sum[b] += conf;
        count[b] += 1;
        if k == y {
            correct[b] += 1;
        }
    }
    let bins = (0..n_bins)
        .map(|b| {
            let n = count[b];
            let (mean_confidence, accuracy) = if n > 0 {
                (conf_sum[b] / n as f64, correct[b] as f64 / n as f64)
            } else {
                (0.0, 0.0)
            };
            Bin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                mean_confidence,
                accuracy,
                count: n,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total: pred.len(),
    })
}

/// Expected calibration error with `n_bins` equal-width bins.
pub fn ece(pred: &PredictiveBatch, n_bins: usize) -> Result<f64> {
    Ok(reliability_bins(pred, n_bins)?.ece())
}

/// Shannon entropy of each predictive row, with `0 · log 0 = 0`.
pub fn predictive_entropy(pred: &PredictiveBatch) -> Vec<f64> {
    pred.rows()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .map(|h| h.max(0.0))
        .collect()
}

/// Area under the ROC curve for scores where higher means "positive":
/// `P(s_pos > s_neg) + ½ P(s_pos = s_neg)`, from tie-averaged ranks.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidArgument("AUROC needs both classes".into()));
    }
    if positive.iter().chain(negative).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("AUROC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j] shares the average rank
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_block = all[i..=j].iter().filter(|(_, p)| *p).count();
        rank_sum_pos += avg_rank * pos_in_block as f64;
        i = j + 1;
    }
    let n_pos = positive.len() as f64;
    let n_neg = negative.len() as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// One evaluation's metrics, as written to the JSONL stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub round: usize,
    pub split: String,
    pub algorithm: String,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub brier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    pub n: usize,
    /// 0 means the prediction was made at the posterior mean.
    pub mc_samples: usize,
}

/// Accuracy, NLL, ECE and Brier score of one predictive batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub brier: f64,
}

impl Scores {
    pub fn of(pred: &PredictiveBatch, ece_bins: usize) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            acc: accuracy(pred),
            nll: nll(pred),
            ece: ece(pred, ece_bins)?,
            brier: brier(pred),
        })
    }

    /// Unweighted mean over several score sets.
    pub fn mean(all: &[Scores]) -> Option<Self> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        Some(Self {
            acc: all.iter().map(|s| s.acc).sum::<f64>() / n,
            nll: all.iter().map(|s| s.nll).sum::<f64>() / n,
            ece: all.iter().map(|s| s.ece).sum::<f64>() / n,
            brier: all.iter().map(|s| s.brier).sum::<f64>() / n,
        })
    }
}
