//! Numeric primitives shared by every loss: similarity functions, a stable
//! log-softmax and softplus, and a small row-major matrix.
//!
//! All arithmetic is `f64`. Reductions run left to right over index order so
//! results are bit-reproducible between runs.

use std::fmt;
use std::str::FromStr;

use crate::error::{domain, shape, Error, Result};

/// Embedding coordinates.
pub type Vector = Vec<f64>;

/// Similarity function `S(a, b)` used to compare an anchor with a reference node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    Cosine,
    InnerProduct,
    NegativeEuclidean,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 3] = [
        SimilarityKind::Cosine,
        SimilarityKind::InnerProduct,
        SimilarityKind::NegativeEuclidean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::InnerProduct => "inner_product",
            SimilarityKind::NegativeEuclidean => "negative_euclidean",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityKind::Cosine),
            "inner_product" => Ok(SimilarityKind::InnerProduct),
            "negative_euclidean" | "euclidean" => Ok(SimilarityKind::NegativeEuclidean),
            other => Err(Error::Parse(format!("unknown similarity kind `{other}`"))),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(shape("empty vector"));
    }
    Ok(())
}

/// `S(a, b)` for the given kind.
pub fn similarity(a: &[f64], b: &[f64], kind: SimilarityKind) -> Result<f64> {
    similarity_with_grad(a, b, kind).map(|(s, _, _)| s)
}

/// `S(a, b)` together with `dS/da` and `dS/db`.
///
/// The Euclidean gradient at `a == b` is taken as zero.
pub fn similarity_with_grad(
    a: &[f64],
    b: &[f64],
    kind: SimilarityKind,
) -> Result<(f64, Vector, Vector)> {
    check_pair(a, b)?;
    match kind {
        SimilarityKind::InnerProduct => Ok((dot(a, b), b.to_vec(), a.to_vec())),
        SimilarityKind::Cosine => {
            let na = norm(a);
            let nb = norm(b);
            if na == 0.0 || nb == 0.0 {
                return Err(domain("cosine similarity of a zero-norm vector"));
            }
            let inv = 1.0 / (na * nb);
            let cos = (dot(a, b) * inv).clamp(-1.0, 1.0);
            let ca = cos / (na * na);
            let cb = cos / (nb * nb);
            let ga = a.iter().zip(b).map(|(x, y)| y * inv - ca * x).collect();
            let gb = a.iter().zip(b).map(|(x, y)| x * inv - cb * y).collect();
            Ok((cos, ga, gb))
        }
        SimilarityKind::NegativeEuclidean => {
            let diff: Vector = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let dist = norm(&diff);
            if dist == 0.0 {
                return Ok((0.0, vec![0.0; a.len()], vec![0.0; a.len()]));
            }
            let ga: Vector = diff.iter().map(|v| -v / dist).collect();
            let gb = ga.iter().map(|v| -v).collect();
            Ok((-dist, ga, gb))
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {v}")));
    }
    Ok(())
}

pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(shape("empty logits"));
    }
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = logits.iter().fold(0.0, |acc, z| acc + (z - max).exp());
    Ok(max + sum.ln())
}

/// Log-softmax computed by subtracting the maximum logit.
pub fn log_softmax(logits: &[f64]) -> Result<Vector> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|z| z - lse).collect())
}

/// `ln(1 + e^x)` in the overflow-free form `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(shape(format!(
                "matvec: {}x{} matrix with length-{} vector",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(shape("matvec_t: length mismatch"));
        }
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            axpy(*yr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, ur) in u.iter().enumerate() {
            axpy(alpha * ur, v, self.row_mut(r));
        }
    }

    /// Row-wise `x · selfᵀ`, i.e. applies the map to every row of `x`.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.cols {
            return Err(shape(format!(
                "apply_rows: {}x{} map on rows of width {}",
                self.rows, self.cols, x.cols
            )));
        }
        let mut out = Matrix::zeros(x.rows, self.rows);
        for i in 0..x.rows {
            for r in 0..self.rows {
                out.set(i, r, dot(self.row(r), x.row(i)));
            }
        }
        Ok(out)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
