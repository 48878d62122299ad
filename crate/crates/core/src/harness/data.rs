//! Synthetic identity-clustered data and its text format.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::math::Matrix;
use crate::record::{write_values, Records};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    /// The last `test_ids` identities are held out from training.
    pub test_ids: usize,
    pub samples_per_id: usize,
    pub raw_dim: usize,
    /// Spread of identity centers.
    pub cluster_scale: f64,
    /// Per-coordinate standard deviation around a center.
    pub noise_scale: f64,
    /// Strength of a shared random linear distortion, if any.
    pub nuisance: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_ids: 80,
            test_ids: 16,
            samples_per_id: 8,
            raw_dim: 32,
            cluster_scale: 1.0,
            noise_scale: 1.0,
            nuisance: Some(1.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 4 {
            return Err(domain(format!("num_ids must be at least 4, got {}", self.num_ids)));
        }
        if self.samples_per_id < 2 {
            return Err(domain(format!("samples_per_id must be at least 2, got {}", self.samples_per_id)));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(domain(format!("noise_scale must be positive, got {}", self.noise_scale)));
        }
        if !(self.cluster_scale >= 0.0 && self.cluster_scale.is_finite()) {
            return Err(domain("cluster_scale must be non-negative"));
        }
        if self.raw_dim == 0 {
            return Err(domain("raw_dim must be positive"));
        }
        if self.test_ids >= self.num_ids {
            return Err(domain("test_ids must leave at least one training identity"));
        }
        if let Some(s) = self.nuisance {
            if !s.is_finite() {
                return Err(domain("nuisance strength must be finite"));
            }
        }
        Ok(())
    }
}

/// Raw samples with identity labels. Identities `0..num_ids - test_ids`
/// are for training; the rest are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_ids: usize,
    pub test_ids: usize,
}

/// Sample indices for one retrieval split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGallery {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn train_ids(&self) -> usize {
        self.num_ids - self.test_ids
    }

    pub fn is_train_id(&self, id: usize) -> bool {
        id < self.train_ids()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_train_id(self.labels[i])).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_train_id(self.labels[i])).collect()
    }

    /// One query per identity among `indices`, the rest gallery. Identity
    /// `j` uses its `(j mod count)`-th sample as the query.
    pub fn query_gallery(&self, indices: &[usize]) -> Result<QueryGallery> {
        let mut per_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &i in indices {
            per_id.entry(self.labels[i]).or_default().push(i);
        }
        let mut query = Vec::new();
        let mut gallery = Vec::new();
        for (id, samples) in per_id {
            if samples.len() < 2 {
                return Err(domain(format!("identity {id} has a single sample and no gallery positive")));
            }
            let q = id % samples.len();
            for (j, &s) in samples.iter().enumerate() {
                if j == q {
                    query.push(s);
                } else {
                    gallery.push(s);
                }
            }
        }
        query.sort_unstable();
        gallery.sort_unstable();
        Ok(QueryGallery { query, gallery })
    }

    pub fn rows(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), self.raw_dim(), |r, c| self.features.get(indices[r], c))
    }

    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{} {} {} {}", self.len(), self.raw_dim(), self.num_ids, self.test_ids)?;
        for i in 0..self.len() {
            write!(out, "{} ", self.labels[i])?;
            write_values(out, self.features.row(i))?;
        }
        Ok(())
    }

    /// Reads the header `num_samples raw_dim num_ids [test_ids]` and one
    /// `id value…` line per sample. A missing `test_ids` means none.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Records::new(reader);
        let head = records.expect_line()?;
        let num_samples: usize = head
            .tag
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad sample count `{}`", head.number, head.tag)))?;
        let raw_dim = head.usize_at(0)?;
        let num_ids = head.usize_at(1)?;
        let test_ids = if head.fields.len() > 2 { head.usize_at(2)? } else { 0 };
        if test_ids >= num_ids.max(1) {
            return Err(Error::Parse(format!("test_ids {test_ids} leaves no training identity")));
        }
        let mut labels = Vec::with_capacity(num_samples);
        let mut data = Vec::with_capacity(num_samples * raw_dim);
        for _ in 0..num_samples {
            let values = records.expect_values(raw_dim + 1)?;
            let id = values[0];
            if !(id >= 0.0 && id.fract() == 0.0 && (id as usize) < num_ids) {
                return Err(Error::Parse(format!("invalid identity {id} for {num_ids} identities")));
            }
            labels.push(id as usize);
            data.extend_from_slice(&values[1..]);
        }
        if let Some(extra) = records.next_line()? {
            return Err(Error::Parse(format!("line {}: trailing data after {num_samples} samples", extra.number)));
        }
        Ok(Self { features: Matrix::from_vec(num_samples, raw_dim, data)?, labels, num_ids, test_ids })
    }
}

/// Draws the dataset described by `spec`. Samples are stored grouped by
/// identity.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.raw_dim;
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let centers = Matrix::from_fn(spec.num_ids, d, |_, _| spec.cluster_scale * normal());
    // x -> (I + strength·G/√d) x with G standard normal
    let nuisance = spec.nuisance.map(|strength| {
        let scale = strength / (d as f64).sqrt();
        Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 } + scale * normal())
    });

    let n = spec.num_ids * spec.samples_per_id;
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for id in 0..spec.num_ids {
        for j in 0..spec.samples_per_id {
            let row = id * spec.samples_per_id + j;
            let sample: Vec<f64> = centers.row(id).iter().map(|c| c + spec.noise_scale * normal()).collect();
            let mapped = match &nuisance {
                Some(m) => m.matvec(&sample)?,
                None => sample,
            };
            features.row_mut(row).copy_from_slice(&mapped);
            labels.push(id);
        }
    }
    Ok(Dataset { features, labels, num_ids: spec.num_ids, test_ids: spec.test_ids })
}
