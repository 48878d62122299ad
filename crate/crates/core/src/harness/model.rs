//! Encoders from raw samples to embeddings, and the full trainable model.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;

use crate::error::{domain, shape, Error, Result};
use crate::losses::ClassifierWeights;
use crate::math::{Matrix, Vector};
use crate::meta::MetaLearnerParams;
use crate::record::{read_matrix, read_vector, write_matrix, write_vector, Records};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Table,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Table => "table",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "table" | "embedding_table" => Ok(EncoderKind::Table),
            other => Err(Error::Parse(format!("unknown encoder `{other}`"))),
        }
    }
}

/// Maps raw samples to `d`-dimensional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    /// `W2 · relu(W1 · x + b1) + b2`.
    Mlp { w1: Matrix, b1: Vector, w2: Matrix, b2: Vector },
    /// One free embedding per dataset sample.
    Table { table: Matrix },
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Matrix,
    hidden: Matrix,
    samples: Vec<usize>,
}

impl Encoder {
    pub fn mlp<R: Rng + ?Sized>(raw_dim: usize, hidden: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if raw_dim == 0 || hidden == 0 || dim == 0 {
            return Err(domain("encoder sizes must be positive"));
        }
        let a1 = (6.0 / raw_dim as f64).sqrt();
        let a2 = (6.0 / hidden as f64).sqrt();
        let w1 = Matrix::from_fn(hidden, raw_dim, |_, _| rng.gen_range(-a1..a1));
        let w2 = Matrix::from_fn(dim, hidden, |_, _| rng.gen_range(-a2..a2) * 0.5);
        Ok(Encoder::Mlp { w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; dim] })
    }

    pub fn table<R: Rng + ?Sized>(samples: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if samples == 0 || dim == 0 {
            return Err(domain("table sizes must be positive"));
        }
        Ok(Encoder::Table { table: Matrix::from_fn(samples, dim, |_, _| rng.gen_range(-1.0..1.0)) })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Mlp { .. } => EncoderKind::Mlp,
            Encoder::Table { .. } => EncoderKind::Table,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Mlp { w2, .. } => w2.rows(),
            Encoder::Table { table } => table.cols(),
        }
    }

    /// Embeds rows of `inputs`; `samples` are their dataset indices, which
    /// the table encoder looks up.
    pub fn forward(&self, inputs: &Matrix, samples: &[usize]) -> Result<(Matrix, EncoderCache)> {
        if inputs.rows() != samples.len() {
            return Err(shape("inputs and sample indices disagree in length"));
        }
        match self {
            Encoder::Mlp { w1, b1, w2, b2 } => {
                if inputs.cols() != w1.cols() {
                    return Err(shape(format!("expected raw dimension {}, got {}", w1.cols(), inputs.cols())));
                }
                let mut hidden = w1.apply_rows(inputs)?;
                for r in 0..hidden.rows() {
                    for (h, b) in hidden.row_mut(r).iter_mut().zip(b1) {
                        *h = (*h + b).max(0.0);
                    }
                }
                let mut out = w2.apply_rows(&hidden)?;
                for r in 0..out.rows() {
                    crate::math::axpy(1.0, b2, out.row_mut(r));
                }
                let cache = EncoderCache { inputs: inputs.clone(), hidden, samples: samples.to_vec() };
                Ok((out, cache))
            }
            Encoder::Table { table } => {
                if let Some(&bad) = samples.iter().find(|&&s| s >= table.rows()) {
                    return Err(Error::Index(format!("sample {bad} outside a table of {}", table.rows())));
                }
                let out = Matrix::from_fn(samples.len(), table.cols(), |r, c| table.get(samples[r], c));
                let cache = EncoderCache { inputs: Matrix::zeros(0, 0), hidden: Matrix::zeros(0, 0), samples: samples.to_vec() };
                Ok((out, cache))
            }
        }
    }

    pub fn embed(&self, inputs: &Matrix, samples: &[usize]) -> Result<Matrix> {
        Ok(self.forward(inputs, samples)?.0)
    }

    /// Gradient of the encoder parameters, flattened as in [`Encoder::flatten`].
    pub fn backward(&self, cache: &EncoderCache, d_out: &Matrix) -> Result<Vector> {
        match self {
            Encoder::Mlp { w1, w2, .. } => {
                let (h, raw, dim) = (w1.rows(), w1.cols(), w2.rows());
                if d_out.shape() != (cache.samples.len(), dim) {
                    return Err(shape("output gradient has the wrong shape"));
                }
                let mut g_w1 = Matrix::zeros(h, raw);
                let mut g_b1 = vec![0.0; h];
                let mut g_w2 = Matrix::zeros(dim, h);
                let mut g_b2 = vec![0.0; dim];
                for r in 0..d_out.rows() {
                    let dy = d_out.row(r);
                    let hid = cache.hidden.row(r);
                    g_w2.add_outer(1.0, dy, hid);
                    crate::math::axpy(1.0, dy, &mut g_b2);
                    let mut dh = w2.matvec_t(dy)?;
                    for (g, &a) in dh.iter_mut().zip(hid) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    g_w1.add_outer(1.0, &dh, cache.inputs.row(r));
                    crate::math::axpy(1.0, &dh, &mut g_b1);
                }
                let mut out = g_w1.into_vec();
                out.extend(g_b1);
                out.extend(g_w2.into_vec());
                out.extend(g_b2);
                Ok(out)
            }
            Encoder::Table { table } => {
                if d_out.shape() != (cache.samples.len(), table.cols()) {
                    return Err(shape("output gradient has the wrong shape"));
                }
                let mut g = Matrix::zeros(table.rows(), table.cols());
                for (r, &s) in cache.samples.iter().enumerate() {
                    crate::math::axpy(1.0, d_out.row(r), g.row_mut(s));
                }
                Ok(g.into_vec())
            }
        }
    }

    pub fn flatten(&self) -> Vector {
        match self {
            Encoder::Mlp { w1, b1, w2, b2 } => {
                let mut out = w1.as_slice().to_vec();
                out.extend_from_slice(b1);
                out.extend_from_slice(w2.as_slice());
                out.extend_from_slice(b2);
                out
            }
            Encoder::Table { table } => table.as_slice().to_vec(),
        }
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flatten().len() {
            return Err(shape("encoder parameter vector has the wrong length"));
        }
        match self {
            Encoder::Mlp { w1, b1, w2, b2 } => {
                let (a, rest) = values.split_at(w1.as_slice().len());
                let (b, rest) = rest.split_at(b1.len());
                let (c, e) = rest.split_at(w2.as_slice().len());
                w1.as_mut_slice().copy_from_slice(a);
                b1.copy_from_slice(b);
                w2.as_mut_slice().copy_from_slice(c);
                b2.copy_from_slice(e);
            }
            Encoder::Table { table } => table.as_mut_slice().copy_from_slice(values),
        }
        Ok(())
    }

    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "encoder {}", self.kind())?;
        match self {
            Encoder::Mlp { w1, b1, w2, b2 } => {
                write_matrix(out, "w1", w1)?;
                write_vector(out, "b1", b1)?;
                write_matrix(out, "w2", w2)?;
                write_vector(out, "b2", b2)
            }
            Encoder::Table { table } => write_matrix(out, "table", table),
        }
    }

    pub fn read_text<R: BufRead>(records: &mut Records<R>) -> Result<Self> {
        let head = records.expect_tag("encoder")?;
        let kind: EncoderKind = head.fields.first().map(String::as_str).unwrap_or("").parse()?;
        match kind {
            EncoderKind::Mlp => {
                let w1 = read_matrix(records, "w1")?;
                let b1 = read_vector(records, "b1")?;
                let w2 = read_matrix(records, "w2")?;
                let b2 = read_vector(records, "b2")?;
                if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
                    return Err(Error::Parse("inconsistent encoder shapes".into()));
                }
                Ok(Encoder::Mlp { w1, b1, w2, b2 })
            }
            EncoderKind::Table => Ok(Encoder::Table { table: read_matrix(records, "table")? }),
        }
    }
}

/// Everything training updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: ClassifierWeights,
    pub meta: MetaLearnerParams,
    /// Inverse temperature of the tuple loss.
    pub inv_temp: f64,
    /// Inverse temperature of the classification loss.
    pub cls_inv_temp: f64,
}

impl Model {
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# model")?;
        self.encoder.write_text(out)?;
        write_matrix(out, "classifier", &self.classifier.weights)?;
        self.meta.write_text(out)?;
        writeln!(out, "inv_temp {}", self.inv_temp)?;
        writeln!(out, "cls_inv_temp {}", self.cls_inv_temp)?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Records::new(reader);
        let encoder = Encoder::read_text(&mut records)?;
        let classifier = ClassifierWeights::new(read_matrix(&mut records, "classifier")?)?;
        let meta = MetaLearnerParams::read_text(&mut records)?;
        let inv_temp = records.expect_tag("inv_temp")?.f64_at(0)?;
        let cls_inv_temp = records.expect_tag("cls_inv_temp")?.f64_at(0)?;
        if classifier.dim() != encoder.dim() || meta.dim != encoder.dim() {
            return Err(Error::Parse("model parts disagree on the embedding dimension".into()));
        }
        Ok(Self { encoder, classifier, meta, inv_temp, cls_inv_temp })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, Segment, Tolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::mlp(5, 7, 4, &mut rng).unwrap();
        let inputs = Matrix::from_fn(6, 5, |_, _| rng.gen_range(-1.0..1.0));
        let readout = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let at = enc.flatten();
        let seg = [Segment { name: "encoder".into(), range: 0..at.len() }];
        let report = check_gradients(
            |x| {
                let mut e = enc.clone();
                e.assign(x)?;
                let (out, cache) = e.forward(&inputs, &[0, 1, 2, 3, 4, 5])?;
                let v = crate::math::dot(out.as_slice(), readout.as_slice());
                Ok((v, e.backward(&cache, &readout)?))
            },
            &at,
            &seg,
            Tolerance::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn table_lookup_and_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::table(4, 2, &mut rng).unwrap();
        let (out, cache) = enc.forward(&Matrix::zeros(3, 9), &[2, 0, 2]).unwrap();
        let Encoder::Table { table } = &enc else { unreachable!() };
        assert_eq!(out.row(0), table.row(2));
        let g = enc.backward(&cache, &Matrix::from_fn(3, 2, |_, _| 1.0)).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(enc.forward(&Matrix::zeros(1, 9), &[4]).is_err());
    }

    #[test]
    fn model_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for encoder in [Encoder::mlp(6, 5, 8, &mut rng).unwrap(), Encoder::table(10, 8, &mut rng).unwrap()] {
            let model = Model {
                encoder,
                classifier: ClassifierWeights::new(Matrix::from_fn(8, 3, |_, _| rng.gen_range(-1.0..1.0))).unwrap(),
                meta: MetaLearnerParams::init(8, 4, &mut rng).unwrap(),
                inv_temp: 9.75,
                cls_inv_temp: 10.5,
            };
            let mut buf = Vec::new();
            model.write_text(&mut buf).unwrap();
            assert_eq!(Model::read_text(buf.as_slice()).unwrap(), model);
        }
    }
}
