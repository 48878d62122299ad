use std::collections::BTreeMap;

use crate::error::{shape, Result};
use crate::math::Matrix;

/// A batch of sample embeddings with their identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `B × d`, one row per sample.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Dataset indices the rows were drawn from.
    pub provenance: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        let provenance = (0..labels.len()).collect();
        Self::with_provenance(features, labels, provenance)
    }

    pub fn with_provenance(
        features: Matrix,
        labels: Vec<usize>,
        provenance: Vec<usize>,
    ) -> Result<Self> {
        if features.rows() != labels.len() || provenance.len() != labels.len() {
            return Err(shape(format!(
                "batch has {} rows but {} labels and {} provenance entries",
                features.rows(),
                labels.len(),
                provenance.len()
            )));
        }
        if !features.is_finite() {
            return Err(crate::Error::Numeric("non-finite batch features".into()));
        }
        Ok(Self { features, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices per class, classes in ascending order.
    pub fn class_members(&self) -> BTreeMap<usize, Vec<usize>> {
        class_members(&self.labels)
    }
}

pub fn class_members(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        out.entry(c).or_default().push(i);
    }
    out
}
