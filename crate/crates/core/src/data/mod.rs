//! Datasets, synthetic generators, file loaders and non-IID partitioners.

mod io;
mod partition;
mod synth;

pub use io::{load_csv, load_idx, write_csv, write_idx_images, write_idx_labels, IdxImages};
pub use partition::{
    class_skew_partition, concept_drift_partition, iid_partition, matched_test_indices, shard_partition,
    PartitionPlan,
};
pub use synth::{ood_clusters, synth_blobs, synth_superclass, BlobGenerator, SuperclassGenerator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;

/// Labeled examples, inputs stored row-major `N × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    n_classes: usize,
    superclass: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, n_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("input dimension must be positive".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            n_classes,
            superclass: None,
        })
    }

    /// Attaches a total map `label -> superclass id`.
    pub fn with_superclasses(mut self, map: Vec<usize>) -> Result<Self> {
        if map.len() != self.n_classes {
            return Err(Error::Shape(format!(
                "superclass map covers {} labels, dataset has {}",
                map.len(),
                self.n_classes
            )));
        }
        self.superclass = Some(map);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn superclasses(&self) -> Option<&[usize]> {
        self.superclass.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.inputs, &self.labels)
    }

    /// Copies the selected rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            labels,
            dim: self.dim,
            n_classes: self.n_classes,
            superclass: self.superclass.clone(),
        }
    }

    /// Replaces every label by its superclass id.
    pub fn to_superclass_task(&self) -> Result<Dataset> {
        let map = self
            .superclass
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no superclass map".into()))?;
        let n_super = map.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            inputs: self.inputs.clone(),
            labels: self.labels.iter().map(|&y| map[y]).collect(),
            dim: self.dim,
            n_classes: n_super,
            superclass: None,
        })
    }

    /// Concatenates datasets with identical dimension and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.n_classes != first.n_classes {
                return Err(Error::Shape("cannot concatenate datasets of different shape".into()));
            }
            inputs.extend_from_slice(&p.inputs);
            labels.extend_from_slice(&p.labels);
        }
        Ok(Dataset {
            inputs,
            labels,
            dim: first.dim,
            n_classes: first.n_classes,
            superclass: first.superclass.clone(),
        })
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}
