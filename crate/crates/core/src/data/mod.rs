//! Datasets, client partitioning and ingestion.

mod augment;
mod io;
mod partition;
mod synthetic;

pub use augment::{augment, horizontal_flip, AugmentConfig};
pub use io::{load_csv, load_idx, parse_idx, IdxArray};
pub use partition::{dirichlet_partition, partition_stats, PartitionAssignment, PartitionStats};
pub use synthetic::{make_synthetic, Generator, SyntheticTaskSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Immutable labelled samples with a shared per-sample feature shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, feature_shape: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let width: usize = feature_shape.iter().product();
        if features.len() != width * labels.len() {
            return Err(Error::input(format!(
                "{} feature values for {} samples of shape {:?}",
                features.len(),
                labels.len(),
                feature_shape
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::input(format!(
                "sample {i} has label {l}, but there are only {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            feature_shape,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.feature_len();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let w = self.feature_len();
        let mut features = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            features,
            feature_shape: self.feature_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Keeps a seeded random subset of at most `k` samples (order preserved).
    pub fn cap(&self, k: usize, seed: u64) -> Dataset {
        if k >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Reinterprets each sample under a different shape of equal size.
    pub fn with_feature_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.feature_len() {
            return Err(Error::input(format!(
                "cannot view features of shape {:?} as {:?}",
                self.feature_shape, shape
            )));
        }
        self.feature_shape = shape;
        Ok(self)
    }
}
