//! The meta-learner `φ(x) = W2 · BN(W1 · x)` and prototype construction.
//!
//! `W1` squeezes a `d`-dimensional feature into `d / reduction` dimensions,
//! a single batch-normalization layer sits in the bottleneck, and `W2` lifts
//! the result back to `d`. Neither projection carries a bias; the BN shift is
//! the only additive term.
//!
//! Train mode normalizes with the current batch statistics and the backward
//! pass differentiates through them. Eval mode uses the running statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::batch::EmbeddingBatch;
use crate::error::{domain, shape, Error, Result};
use crate::math::{axpy, Matrix, Vector};
use crate::record::{read_matrix, read_vector, write_matrix, write_vector, Records};

pub const DEFAULT_REDUCTION: usize = 8;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerParams {
    pub dim: usize,
    pub reduction: usize,
    /// `(d / reduction) × d`
    pub w1: Matrix,
    /// `d × (d / reduction)`
    pub w2: Matrix,
    pub bn_scale: Vector,
    pub bn_shift: Vector,
    pub bn_running_mean: Vector,
    pub bn_running_var: Vector,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

/// Gradients for the trainable part of [`MetaLearnerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGrads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub bn_scale: Vector,
    pub bn_shift: Vector,
}

impl MetaGrads {
    pub fn zeros_like(params: &MetaLearnerParams) -> Self {
        let hidden = params.hidden();
        Self {
            w1: Matrix::zeros(hidden, params.dim),
            w2: Matrix::zeros(params.dim, hidden),
            bn_scale: vec![0.0; hidden],
            bn_shift: vec![0.0; hidden],
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &MetaGrads) {
        self.w1.add_scaled(alpha, &other.w1);
        self.w2.add_scaled(alpha, &other.w2);
        axpy(alpha, &other.bn_scale, &mut self.bn_scale);
        axpy(alpha, &other.bn_shift, &mut self.bn_shift);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.w1.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
        out.w2.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
        out.bn_scale.iter_mut().for_each(|v| *v *= alpha);
        out.bn_shift.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Flattened in the order `w1, w2, bn_scale, bn_shift`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.bn_scale);
        out.extend_from_slice(&self.bn_shift);
        out
    }
}

/// Per-feature statistics of one train-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vector,
    /// Biased (population) variance, used for normalization.
    pub var: Vector,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct MetaCache {
    mode: Mode,
    inputs: Matrix,
    normalized: Matrix,
    bn_out: Matrix,
    inv_std: Vector,
}

#[derive(Debug, Clone)]
pub struct MetaForward {
    /// `B × d` mapped features.
    pub output: Matrix,
    pub stats: Option<BatchStats>,
    pub cache: MetaCache,
}

impl MetaLearnerParams {
    /// Uniform `±1/√fan_in` projections, identity BN.
    pub fn init<R: Rng + ?Sized>(dim: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || dim == 0 || dim % reduction != 0 {
            return Err(domain(format!(
                "feature dim {dim} is not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = dim / reduction;
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::from_fn(hidden, dim, |_, _| rng.gen_range(-b1..b1));
        let w2 = Matrix::from_fn(dim, hidden, |_, _| rng.gen_range(-b2..b2));
        Ok(Self {
            dim,
            reduction,
            w1,
            w2,
            bn_scale: vec![1.0; hidden],
            bn_shift: vec![0.0; hidden],
            bn_running_mean: vec![0.0; hidden],
            bn_running_var: vec![1.0; hidden],
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        })
    }

    pub fn hidden(&self) -> usize {
        self.dim / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.reduction == 0 || self.dim % self.reduction != 0 {
            return Err(domain("feature dim not divisible by reduction ratio"));
        }
        if self.w1.shape() != (h, self.dim) || self.w2.shape() != (self.dim, h) {
            return Err(shape("meta-learner weight shapes disagree with (d, s_r)"));
        }
        for v in [&self.bn_scale, &self.bn_shift, &self.bn_running_mean, &self.bn_running_var] {
            if v.len() != h {
                return Err(shape("meta-learner BN vector length disagrees with d / s_r"));
            }
        }
        if self.bn_running_var.iter().any(|v| *v < 0.0) {
            return Err(domain("negative running variance"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(domain("bn_epsilon must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(domain("bn_momentum must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Applies `φ` to every row of `inputs`.
    pub fn forward_batch(&self, inputs: &Matrix, mode: Mode) -> Result<MetaForward> {
        if inputs.cols() != self.dim {
            return Err(shape(format!(
                "meta-learner expects width {}, got {}",
                self.dim,
                inputs.cols()
            )));
        }
        let n = inputs.rows();
        let hidden = self.hidden();
        let pre = self.w1.apply_rows(inputs)?;

        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(domain(
                        "train-mode batch normalization needs at least 2 samples",
                    ));
                }
                let mut mean = vec![0.0; hidden];
                for i in 0..n {
                    axpy(1.0, pre.row(i), &mut mean);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; hidden];
                for i in 0..n {
                    for (k, v) in var.iter_mut().enumerate() {
                        let c = pre.get(i, k) - mean[k];
                        *v += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count: n };
                (mean, var, Some(stats))
            }
            Mode::Eval => (self.bn_running_mean.clone(), self.bn_running_var.clone(), None),
        };

        let inv_std: Vector = var.iter().map(|v| 1.0 / (v + self.bn_epsilon).sqrt()).collect();
        let mut normalized = Matrix::zeros(n, hidden);
        let mut bn_out = Matrix::zeros(n, hidden);
        for i in 0..n {
            for k in 0..hidden {
                let xh = (pre.get(i, k) - mean[k]) * inv_std[k];
                normalized.set(i, k, xh);
                bn_out.set(i, k, self.bn_scale[k] * xh + self.bn_shift[k]);
            }
        }
        let output = self.w2.apply_rows(&bn_out)?;
        Ok(MetaForward {
            output,
            stats,
            cache: MetaCache { mode, inputs: inputs.clone(), normalized, bn_out, inv_std },
        })
    }

    /// Backward pass of [`forward_batch`](Self::forward_batch). Returns the
    /// gradient with respect to the inputs and the parameter gradients.
    pub fn backward_batch(&self, cache: &MetaCache, d_output: &Matrix) -> Result<(Matrix, MetaGrads)> {
        let n = cache.inputs.rows();
        if d_output.shape() != (n, self.dim) {
            return Err(shape("meta-learner output gradient has the wrong shape"));
        }
        let hidden = self.hidden();
        let mut grads = MetaGrads::zeros_like(self);

        // through W2
        let mut d_bn = Matrix::zeros(n, hidden);
        for i in 0..n {
            grads.w2.add_outer(1.0, d_output.row(i), cache.bn_out.row(i));
            let g = self.w2.matvec_t(d_output.row(i))?;
            d_bn.row_mut(i).copy_from_slice(&g);
        }

        // through the affine part of BN
        let mut d_norm = Matrix::zeros(n, hidden);
        for i in 0..n {
            for k in 0..hidden {
                let g = d_bn.get(i, k);
                grads.bn_scale[k] += g * cache.normalized.get(i, k);
                grads.bn_shift[k] += g;
                d_norm.set(i, k, g * self.bn_scale[k]);
            }
        }

        // through the normalization
        let mut d_pre = Matrix::zeros(n, hidden);
        match cache.mode {
            Mode::Eval => {
                for i in 0..n {
                    for k in 0..hidden {
                        d_pre.set(i, k, d_norm.get(i, k) * cache.inv_std[k]);
                    }
                }
            }
            Mode::Train => {
                let nf = n as f64;
                for k in 0..hidden {
                    let mut sum = 0.0;
                    let mut sum_xh = 0.0;
                    for i in 0..n {
                        sum += d_norm.get(i, k);
                        sum_xh += d_norm.get(i, k) * cache.normalized.get(i, k);
                    }
                    for i in 0..n {
                        let v = cache.inv_std[k] / nf
                            * (nf * d_norm.get(i, k) - sum - cache.normalized.get(i, k) * sum_xh);
                        d_pre.set(i, k, v);
                    }
                }
            }
        }

        // through W1
        let mut d_inputs = Matrix::zeros(n, self.dim);
        for i in 0..n {
            grads.w1.add_outer(1.0, d_pre.row(i), cache.inputs.row(i));
            let g = self.w1.matvec_t(d_pre.row(i))?;
            d_inputs.row_mut(i).copy_from_slice(&g);
        }
        Ok((d_inputs, grads))
    }

    /// Exponential-moving-average update of the running statistics. The
    /// running variance tracks the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.bn_momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for k in 0..self.hidden() {
            self.bn_running_mean[k] = (1.0 - m) * self.bn_running_mean[k] + m * stats.mean[k];
            self.bn_running_var[k] =
                (1.0 - m) * self.bn_running_var[k] + m * stats.var[k] * correction;
        }
    }

    /// Trainable values in the order of [`MetaGrads::flatten`].
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.bn_scale);
        out.extend_from_slice(&self.bn_shift);
        out
    }

    pub fn trainable_len(&self) -> usize {
        let h = self.hidden();
        2 * h * self.dim + 2 * h
    }

    pub fn assign_trainable(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.trainable_len() {
            return Err(shape("trainable vector has the wrong length"));
        }
        let h = self.hidden();
        let (w1, rest) = values.split_at(h * self.dim);
        let (w2, rest) = rest.split_at(h * self.dim);
        let (scale, shift) = rest.split_at(h);
        self.w1.as_mut_slice().copy_from_slice(w1);
        self.w2.as_mut_slice().copy_from_slice(w2);
        self.bn_scale.copy_from_slice(scale);
        self.bn_shift.copy_from_slice(shift);
        Ok(())
    }

    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "meta {} {}", self.dim, self.reduction)?;
        writeln!(out, "bn_epsilon {}", self.bn_epsilon)?;
        writeln!(out, "bn_momentum {}", self.bn_momentum)?;
        write_matrix(out, "w1", &self.w1)?;
        write_matrix(out, "w2", &self.w2)?;
        write_vector(out, "bn_scale", &self.bn_scale)?;
        write_vector(out, "bn_shift", &self.bn_shift)?;
        write_vector(out, "bn_running_mean", &self.bn_running_mean)?;
        write_vector(out, "bn_running_var", &self.bn_running_var)?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(records: &mut Records<R>) -> Result<Self> {
        let header = records.expect_tag("meta")?;
        let dim = header.usize_at(0)?;
        let reduction = header.usize_at(1)?;
        let bn_epsilon = records.expect_tag("bn_epsilon")?.f64_at(0)?;
        let bn_momentum = records.expect_tag("bn_momentum")?.f64_at(0)?;
        let params = Self {
            dim,
            reduction,
            w1: read_matrix(records, "w1")?,
            w2: read_matrix(records, "w2")?,
            bn_scale: read_vector(records, "bn_scale")?,
            bn_shift: read_vector(records, "bn_shift")?,
            bn_running_mean: read_vector(records, "bn_running_mean")?,
            bn_running_var: read_vector(records, "bn_running_var")?,
            bn_epsilon,
            bn_momentum,
        };
        params.validate()?;
        Ok(params)
    }
}

/// `φ(x)` for a single vector.
///
/// In train mode the normalization statistics come from `batch_context`, a
/// batch of inputs (rows of width `d`) which must hold at least two rows.
pub fn meta_forward(
    x: &[f64],
    params: &MetaLearnerParams,
    mode: Mode,
    batch_context: Option<&Matrix>,
) -> Result<Vector> {
    if x.len() != params.dim {
        return Err(shape(format!("expected length {}, got {}", params.dim, x.len())));
    }
    match mode {
        Mode::Eval => {
            let single = Matrix::from_vec(1, params.dim, x.to_vec())?;
            Ok(params.forward_batch(&single, Mode::Eval)?.output.row(0).to_vec())
        }
        Mode::Train => {
            let ctx = batch_context
                .ok_or_else(|| domain("train mode requires a batch context"))?;
            let stats = params
                .forward_batch(ctx, Mode::Train)?
                .stats
                .expect("train mode yields statistics");
            let mut frozen = params.clone();
            frozen.bn_running_mean = stats.mean;
            frozen.bn_running_var = stats.var;
            meta_forward(x, &frozen, Mode::Eval, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vector,
    /// Batch rows averaged into `vector`.
    pub members: Vec<usize>,
}

impl Prototype {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }
}

/// Per-class means of mapped features, keyed by class id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeSet {
    pub classes: BTreeMap<usize, Prototype>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.classes.get(&class)
    }

    /// Position of `class` in ascending class order.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.keys().position(|&c| c == class)
    }

    /// Averages `rows` of `mapped` per class of `labels`, optionally leaving
    /// one row out of its own class mean.
    pub fn from_mapped(mapped: &Matrix, labels: &[usize], exclude: Option<usize>) -> Result<Self> {
        if mapped.rows() != labels.len() {
            return Err(shape("mapped features and labels disagree in length"));
        }
        if labels.is_empty() {
            return Err(domain("cannot build prototypes from an empty batch"));
        }
        if let Some(e) = exclude {
            if e >= labels.len() {
                return Err(Error::Index(format!("excluded row {e} out of range")));
            }
        }
        let mut classes = BTreeMap::new();
        for (class, rows) in crate::batch::class_members(labels) {
            let members: Vec<usize> = rows.into_iter().filter(|r| Some(*r) != exclude).collect();
            if members.is_empty() {
                return Err(domain(format!("excluding the anchor empties class {class}")));
            }
            let mut vector = vec![0.0; mapped.cols()];
            for &r in &members {
                axpy(1.0, mapped.row(r), &mut vector);
            }
            let inv = 1.0 / members.len() as f64;
            vector.iter_mut().for_each(|v| *v *= inv);
            classes.insert(class, Prototype { vector, members });
        }
        Ok(Self { classes })
    }
}

/// Prototypes `mean_j φ(x_{c,j})` for every class in the batch. The optional
/// `exclude` row is left out of its own class mean only; in train mode it
/// still contributes to the BN statistics.
pub fn compute_prototypes(
    batch: &EmbeddingBatch,
    params: &MetaLearnerParams,
    mode: Mode,
    exclude: Option<usize>,
) -> Result<PrototypeSet> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let mapped = params.forward_batch(&batch.features, mode)?.output;
    PrototypeSet::from_mapped(&mapped, &batch.labels, exclude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> MetaLearnerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MetaLearnerParams::init(16, 8, &mut rng).unwrap();
        for v in p.bn_scale.iter_mut().chain(p.bn_shift.iter_mut()) {
            *v = rng.gen_range(-1.5..1.5);
        }
        for v in p.bn_running_mean.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in p.bn_running_var.iter_mut() {
            *v = rng.gen_range(0.2..2.0);
        }
        p
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_w2_maps_to_zero() {
        let mut p = params(1);
        p.w2 = Matrix::zeros(16, 2);
        let x = random_matrix(1, 16, 2);
        let y = meta_forward(x.row(0), &p, Mode::Eval, None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_batch_normalizes_to_shift() {
        let p = params(3);
        let row = random_matrix(1, 16, 4).into_vec();
        let batch = Matrix::from_rows(&vec![row; 5]).unwrap();
        let out = p.forward_batch(&batch, Mode::Train).unwrap().output;
        let expected = p.w2.matvec(&p.bn_shift).unwrap();
        for i in 0..5 {
            for (a, b) in out.row(i).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_matches_straight_line_oracle() {
        let p = params(5);
        let x = random_matrix(1, 16, 6).into_vec();
        let y = meta_forward(&x, &p, Mode::Eval, None).unwrap();
        // independent oracle: explicit loops over the weight entries
        let mut h = [0.0; 2];
        for k in 0..2 {
            for j in 0..16 {
                h[k] += p.w1.get(k, j) * x[j];
            }
            h[k] = p.bn_scale[k] * (h[k] - p.bn_running_mean[k])
                / (p.bn_running_var[k] + p.bn_epsilon).sqrt()
                + p.bn_shift[k];
        }
        for i in 0..16 {
            let expect = p.w2.get(i, 0) * h[0] + p.w2.get(i, 1) * h[1];
            assert!((y[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn train_mode_errors() {
        let p = params(7);
        let single = random_matrix(1, 16, 8);
        assert!(matches!(p.forward_batch(&single, Mode::Train), Err(Error::Domain(_))));
        assert!(matches!(
            meta_forward(single.row(0), &p, Mode::Train, None),
            Err(Error::Domain(_))
        ));
        assert!(matches!(meta_forward(&[1.0; 3], &p, Mode::Eval, None), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MetaLearnerParams::init(10, 8, &mut rng).is_err());
    }

    #[test]
    fn train_mode_single_vector_uses_context_statistics() {
        let p = params(9);
        let ctx = random_matrix(6, 16, 10);
        let full = p.forward_batch(&ctx, Mode::Train).unwrap().output;
        let y = meta_forward(ctx.row(2), &p, Mode::Train, Some(&ctx)).unwrap();
        for (a, b) in y.iter().zip(full.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let mut p = params(11);
        p.bn_scale = vec![1.0; 2];
        p.bn_shift = vec![0.0; 2];
        let x = random_matrix(12, 16, 12);
        let fwd = p.forward_batch(&x, Mode::Train).unwrap();
        for k in 0..2 {
            let col = fwd.cache.normalized.column(k);
            let mean = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-6);
            let raw_var = fwd.stats.as_ref().unwrap().var[k];
            let expected = raw_var / (raw_var + p.bn_epsilon);
            assert!((var - expected).abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_mode_independent_of_batch_composition() {
        let p = params(13);
        let a = random_matrix(5, 16, 14);
        let mut rows: Vec<Vector> = (0..5).map(|i| a.row(i).to_vec()).collect();
        rows.reverse();
        rows.push(vec![0.3; 16]);
        let b = Matrix::from_rows(&rows).unwrap();
        let ya = p.forward_batch(&a, Mode::Eval).unwrap().output;
        let yb = p.forward_batch(&b, Mode::Eval).unwrap().output;
        for i in 0..5 {
            assert_eq!(ya.row(i), yb.row(4 - i));
        }
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut p = params(15);
        let before = p.bn_running_mean.clone();
        let x = random_matrix(4, 16, 16);
        let stats = p.forward_batch(&x, Mode::Train).unwrap().stats.unwrap();
        p.update_running_stats(&stats);
        for k in 0..2 {
            let expect = 0.9 * before[k] + 0.1 * stats.mean[k];
            assert!((p.bn_running_mean[k] - expect).abs() < 1e-15);
        }
        assert!(p.bn_running_var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn prototypes_are_member_means() {
        let p = params(17);
        let feats = random_matrix(4, 16, 18);
        let batch = EmbeddingBatch::new(feats.clone(), vec![3, 3, 3, 3]).unwrap();
        let protos = compute_prototypes(&batch, &p, Mode::Eval, None).unwrap();
        let proto = &protos.get(3).unwrap().vector;
        let mapped: Vec<Vector> = (0..4)
            .map(|i| meta_forward(feats.row(i), &p, Mode::Eval, None).unwrap())
            .collect();
        for j in 0..16 {
            let mean = (mapped[0][j] + mapped[1][j] + mapped[2][j] + mapped[3][j]) / 4.0;
            assert!((proto[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_and_duplicate_members() {
        let p = params(19);
        let feats = random_matrix(3, 16, 20);
        let batch = EmbeddingBatch::new(feats.clone(), vec![0, 1, 2]).unwrap();
        let protos = compute_prototypes(&batch, &p, Mode::Eval, None).unwrap();
        for c in 0..3 {
            let direct = meta_forward(feats.row(c), &p, Mode::Eval, None).unwrap();
            assert_eq!(protos.get(c).unwrap().vector, direct);
            assert_eq!(protos.get(c).unwrap().member_count(), 1);
        }
        let dup = Matrix::from_rows(&[feats.row(0).to_vec(), feats.row(0).to_vec()]).unwrap();
        let batch = EmbeddingBatch::new(dup, vec![5, 5]).unwrap();
        let protos = compute_prototypes(&batch, &p, Mode::Eval, None).unwrap();
        let direct = meta_forward(feats.row(0), &p, Mode::Eval, None).unwrap();
        for (a, b) in protos.get(5).unwrap().vector.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exclusion() {
        let p = params(21);
        let feats = random_matrix(3, 16, 22);
        let batch = EmbeddingBatch::new(feats, vec![0, 0, 1]).unwrap();
        let protos = compute_prototypes(&batch, &p, Mode::Eval, Some(0)).unwrap();
        assert_eq!(protos.get(0).unwrap().members, vec![1]);
        assert_eq!(protos.get(1).unwrap().members, vec![2]);
        assert!(matches!(
            compute_prototypes(&batch, &p, Mode::Eval, Some(2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn union_is_weighted_mean() {
        let p = params(23);
        let feats = random_matrix(7, 16, 24);
        let mapped = p.forward_batch(&feats, Mode::Eval).unwrap().output;
        let all = PrototypeSet::from_mapped(&mapped, &[0; 7], None).unwrap();
        let left = PrototypeSet::from_mapped(&mapped, &[0, 0, 0, 1, 1, 1, 1], None).unwrap();
        let (a, b) = (left.get(0).unwrap(), left.get(1).unwrap());
        for j in 0..16 {
            let w = (3.0 * a.vector[j] + 4.0 * b.vector[j]) / 7.0;
            assert!((all.get(0).unwrap().vector[j] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let p = params(25);
        let mut buf = Vec::new();
        p.write_text(&mut buf).unwrap();
        let mut records = Records::new(std::io::Cursor::new(buf));
        let q = MetaLearnerParams::read_text(&mut records).unwrap();
        assert_eq!(p, q);
    }
}
