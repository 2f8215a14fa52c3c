use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::GlobalModel;
use crate::error::{Error, Result};
use crate::ivon::PosteriorRecord;
use crate::metrics::MetricsRecord;

/// What happened in one completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Mean training loss of each sampled client's fit, in `sampled` order.
    pub client_losses: Vec<Option<f64>>,
    pub metrics: Vec<MetricsRecord>,
}

/// Append-only log of completed rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    rounds: Vec<RoundRecord>,
}

impl RoundHistory {
    pub fn push(&mut self, record: RoundRecord) {
        debug_assert!(self.rounds.last().is_none_or(|r| r.round < record.round));
        self.rounds.push(record);
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn metrics(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.rounds.iter().flat_map(|r| r.metrics.iter())
    }

    /// Rounds in which an evaluation ran.
    pub fn evaluations(&self) -> usize {
        self.rounds.iter().filter(|r| !r.metrics.is_empty()).count()
    }
}

/// Resumable state after a completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub round: usize,
    pub dtype: String,
    pub len: usize,
    pub global: GlobalModel,
    /// Per-client personalized posteriors, `null` before first participation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalized: Option<Vec<Option<PosteriorRecord>>>,
}

impl Checkpoint {
    pub fn new(round: usize, global: GlobalModel, personalized: Option<Vec<Option<PosteriorRecord>>>) -> Self {
        Self {
            round,
            dtype: "f64".into(),
            len: global.len(),
            global,
            personalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f64" {
            return Err(Error::Serde(format!("unsupported checkpoint dtype {:?}", self.dtype)));
        }
        let models = std::iter::once((&self.global.mean, &self.global.hessian)).chain(
            self.personalized
                .iter()
                .flatten()
                .flatten()
                .map(|r| (&r.mean, &r.hessian)),
        );
        for (mean, hessian) in models {
            if mean.len() != self.len || hessian.len() != self.len {
                return Err(Error::Serde(format!(
                    "checkpoint declares {} parameters but holds a model with {}/{}",
                    self.len,
                    mean.len(),
                    hessian.len()
                )));
            }
            if hessian.iter().any(|h| !(*h >= 0.0)) || mean.first_non_finite().is_some() {
                return Err(Error::Serde("checkpoint holds invalid values".into()));
            }
        }
        for rec in self.personalized.iter().flatten().flatten() {
            rec.clone().into_posterior()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Self = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cp.validate()?;
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
