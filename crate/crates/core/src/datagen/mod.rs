//! Datasets and heterogeneous client partitions.

mod idx;
mod partition;
mod qp;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use partition::{
    partition_dirichlet, partition_dirichlet_detailed, partition_shards, DirichletPartition,
};
pub use qp::{solve_balance_qp, QP_FLOOR, QP_MAX_ITERATIONS};
pub use synthetic::{gen_synthetic, gen_synthetic_split};

/// Labeled examples stored as row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { features, dim, labels, num_classes })
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Disjoint assignment of dataset indices to clients with size weights `p_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    #[serde(rename = "clients")]
    assignments: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl Partition {
    /// Builds a partition over a dataset of `dataset_len` examples, checking
    /// disjointness and index validity. Weights are `|D_k| / sum_j |D_j|`.
    pub fn from_assignments(assignments: Vec<Vec<usize>>, dataset_len: usize) -> Result<Self> {
        if assignments.is_empty() {
            return Err(invalid("partition needs at least one client"));
        }
        let mut seen = vec![false; dataset_len];
        for (k, client) in assignments.iter().enumerate() {
            for &i in client {
                if i >= dataset_len {
                    return Err(invalid(format!("client {k}: index {i} out of range {dataset_len}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(invalid(format!("client {k}: index {i} assigned twice")));
                }
            }
        }
        let total: usize = assignments.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(invalid("partition assigns no examples"));
        }
        let weights = assignments
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect();
        Ok(Self { assignments, weights })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Per-client label histogram.
    pub fn label_counts(&self, data: &LabeledDataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|client| {
                let mut counts = vec![0; data.num_classes()];
                for &i in client {
                    counts[data.label(i)] += 1;
                }
                counts
            })
            .collect()
    }

    /// Most frequent label per client (lowest label on ties, 0 for empty clients).
    pub fn dominant_labels(&self, data: &LabeledDataset) -> Vec<usize> {
        self.label_counts(data)
            .iter()
            .map(|counts| {
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses the JSON document and re-validates it against `dataset_len`.
    pub fn from_json(s: &str, dataset_len: usize) -> Result<Self> {
        let raw: Partition = serde_json::from_str(s)?;
        let rebuilt = Partition::from_assignments(raw.assignments, dataset_len)?;
        Ok(rebuilt)
    }
}
