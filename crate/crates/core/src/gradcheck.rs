//! Central finite differences and a suite that certifies every analytic
//! gradient in the crate against them.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, meta_ntuple_loss, mpn_tuple_loss, ntuple_loss, pn_tuple_loss, triplet_hard_margin,
    triplet_soft_margin, unified_loss, ClassifierWeights, InverseTemperature, LossResult,
};
use crate::math::{similarity_with_grad, Matrix, SimilarityKind, Vector};
use crate::meta::{compute_prototypes, MetaLearnerParams, Mode, Prototype, PrototypeSet};
use crate::objective::{batch_loss_with_tuples, select_tuples, LossConfig, LossParams, Mining, TupleKind};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-5;
pub const DEFAULT_ATOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    pub eps: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, eps: DEFAULT_EPS }
    }
}

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate.
pub fn numeric_gradient<F>(mut f: F, at: &[f64], eps: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        x[i] = at[i] + eps;
        let up = f(&x)?;
        x[i] = at[i] - eps;
        let down = f(&x)?;
        x[i] = at[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite evaluation at coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Richardson extrapolation of central differences at `eps` and `eps / 2`,
/// `(4·D(eps/2) − D(eps)) / 3`, which cancels the `O(eps²)` truncation term.
pub fn extrapolated_gradient<F>(mut f: F, at: &[f64], eps: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let coarse = numeric_gradient(&mut f, at, eps)?;
    let fine = numeric_gradient(&mut f, at, eps / 2.0)?;
    Ok(fine.iter().zip(&coarse).map(|(h, c)| (4.0 * h - c) / 3.0).collect())
}

/// A named contiguous range of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub range: Range<usize>,
}

impl Segment {
    pub fn of<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.range.clone()]
    }

    pub fn of_mut<'a>(&self, x: &'a mut [f64]) -> &'a mut [f64] {
        &mut x[self.range.clone()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub len: usize,
    /// `max |a − n| / max(|a|, |n|)` over the segment; zero where both vanish.
    pub max_rel_error: f64,
    /// Coordinate (within the segment) closest to or furthest past the tolerance.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub rtol: f64,
    pub atol: f64,
    pub eps: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "report passed={} rtol={:e} atol={:e} eps={:e}",
            self.passed, self.rtol, self.atol, self.eps
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "param {} len={} max_rel_error={:.3e} worst_index={} analytic={:e} numeric={:e} {}",
                e.name,
                e.len,
                e.max_rel_error,
                e.worst_index,
                e.worst_analytic,
                e.worst_numeric,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient returned by `f` against finite
/// differences of its value, coordinate by coordinate, requiring
/// `|a − n| ≤ atol + rtol·max(|a|, |n|)`.
///
/// The numeric side is [`extrapolated_gradient`]: at `eps = 1e-5` a plain
/// central difference through train-mode batch normalization with a
/// low-variance unit carries truncation error above `atol`.
///
/// `f` must be deterministic. `segments` name disjoint ranges covering `at`.
pub fn check_gradients<F>(mut f: F, at: &[f64], segments: &[Segment], tol: Tolerance) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vector)>,
{
    let (_, analytic) = f(at)?;
    if analytic.len() != at.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has length {} for {} parameters",
            analytic.len(),
            at.len()
        )));
    }
    let covered: usize = segments.iter().map(|s| s.range.len()).sum();
    if covered != at.len() || segments.iter().any(|s| s.range.end > at.len()) {
        return Err(Error::Shape("segments must cover the parameter vector exactly".into()));
    }
    let numeric = extrapolated_gradient(|x| f(x).map(|(v, _)| v), at, tol.eps)?;

    let mut entries = Vec::with_capacity(segments.len());
    for seg in segments {
        let mut entry = GradEntry {
            name: seg.name.clone(),
            len: seg.range.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            passed: true,
        };
        let mut worst_ratio = -1.0;
        for (j, i) in seg.range.clone().enumerate() {
            let (a, n) = (analytic[i], numeric[i]);
            let scale = a.abs().max(n.abs());
            let diff = (a - n).abs();
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            entry.max_rel_error = entry.max_rel_error.max(rel);
            let ratio = diff / (tol.atol + tol.rtol * scale);
            if !(ratio <= 1.0) {
                entry.passed = false;
            }
            if ratio > worst_ratio || ratio.is_nan() {
                worst_ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
                entry.worst_index = j;
                entry.worst_analytic = a;
                entry.worst_numeric = n;
            }
        }
        entries.push(entry);
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradReport { entries, rtol: tol.rtol, atol: tol.atol, eps: tol.eps, passed })
}

/// Every gradient-bearing operation the suite certifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradTarget {
    Similarity,
    Unified,
    Classification,
    TripletHard,
    TripletSoft,
    NTuple,
    PnTuple,
    MpnTuple,
    MetaNTuple,
    MetaForwardTrain,
    MetaForwardEval,
    Prototypes,
    MpnThroughMeta,
    Combined,
}

impl GradTarget {
    pub const ALL: [GradTarget; 14] = [
        GradTarget::Similarity,
        GradTarget::Unified,
        GradTarget::Classification,
        GradTarget::TripletHard,
        GradTarget::TripletSoft,
        GradTarget::NTuple,
        GradTarget::PnTuple,
        GradTarget::MpnTuple,
        GradTarget::MetaNTuple,
        GradTarget::MetaForwardTrain,
        GradTarget::MetaForwardEval,
        GradTarget::Prototypes,
        GradTarget::MpnThroughMeta,
        GradTarget::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Similarity => "similarity",
            GradTarget::Unified => "unified",
            GradTarget::Classification => "classification",
            GradTarget::TripletHard => "triplet_hard",
            GradTarget::TripletSoft => "triplet_soft",
            GradTarget::NTuple => "ntuple",
            GradTarget::PnTuple => "pn_tuple",
            GradTarget::MpnTuple => "mpn_tuple",
            GradTarget::MetaNTuple => "meta_ntuple",
            GradTarget::MetaForwardTrain => "meta_forward_train",
            GradTarget::MetaForwardEval => "meta_forward_eval",
            GradTarget::Prototypes => "prototypes",
            GradTarget::MpnThroughMeta => "mpn_tuple_meta",
            GradTarget::Combined => "combined",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown gradcheck target `{s}`")))
    }
}

/// Random-configuration sizes used by [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteShape {
    pub dim: usize,
    pub reduction: usize,
    pub p: usize,
    pub k: usize,
}

impl Default for SuiteShape {
    fn default() -> Self {
        Self { dim: 16, reduction: 8, p: 4, k: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub target: GradTarget,
    pub trials: usize,
    pub failures: usize,
    /// Draws discarded for sitting next to a hinge kink.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub first_failure: Option<(usize, GradReport)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "target {} trials={} failures={} resampled={} max_rel_error={:.3e} passed={}",
            self.target,
            self.trials,
            self.failures,
            self.resampled,
            self.max_rel_error,
            self.passed()
        )?;
        if let Some((trial, report)) = &self.first_failure {
            writeln!(f, "first failure at trial {trial}")?;
            write!(f, "{report}")?;
        }
        Ok(())
    }
}

/// Runs `trials` random configurations of `target` through [`check_gradients`].
pub fn run_suite(target: GradTarget, trials: usize, seed: u64, tol: Tolerance) -> Result<SuiteReport> {
    run_suite_with(target, trials, seed, tol, SuiteShape::default())
}

pub fn run_suite_with(
    target: GradTarget,
    trials: usize,
    seed: u64,
    tol: Tolerance,
    shape: SuiteShape,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        target,
        trials,
        failures: 0,
        resampled: 0,
        max_rel_error: 0.0,
        first_failure: None,
    };
    for trial in 0..trials {
        let problem = loop {
            match build_problem(target, trial, shape, tol, &mut rng)? {
                Some(p) => break p,
                None => report.resampled += 1,
            }
        };
        let eval = &problem.eval;
        let r = check_gradients(|x| eval(x), &problem.at, &problem.segments, tol)?;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error());
        if !r.passed {
            report.failures += 1;
            if report.first_failure.is_none() {
                report.first_failure = Some((trial, r));
            }
        }
    }
    Ok(report)
}

type Eval = Box<dyn Fn(&[f64]) -> Result<(f64, Vector)>>;

struct Problem {
    at: Vector,
    segments: Vec<Segment>,
    eval: Eval,
}

/// Accumulates named parameter blocks into one flat vector.
#[derive(Default)]
struct Packer {
    values: Vector,
    segments: Vec<Segment>,
}

impl Packer {
    fn push(&mut self, name: impl Into<String>, values: &[f64]) -> Segment {
        let start = self.values.len();
        self.values.extend_from_slice(values);
        let seg = Segment { name: name.into(), range: start..self.values.len() };
        self.segments.push(seg.clone());
        seg
    }

    fn push_meta(&mut self, meta: &MetaLearnerParams) -> Range<usize> {
        let start = self.values.len();
        let h = meta.hidden();
        self.push("meta.w1", meta.w1.as_slice());
        self.push("meta.w2", meta.w2.as_slice());
        self.push("meta.bn_scale", &meta.bn_scale);
        self.push("meta.bn_shift", &meta.bn_shift);
        debug_assert_eq!(self.values.len() - start, meta.trainable_len());
        debug_assert_eq!(meta.trainable_len(), 2 * h * meta.dim + 2 * h);
        start..self.values.len()
    }

    fn finish(self, eval: Eval) -> Problem {
        Problem { at: self.values, segments: self.segments, eval }
    }
}

fn with_meta(base: &MetaLearnerParams, range: &Range<usize>, x: &[f64]) -> Result<MetaLearnerParams> {
    let mut meta = base.clone();
    meta.assign_trainable(&x[range.clone()])?;
    Ok(meta)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vector {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_meta(dim: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<MetaLearnerParams> {
    let mut meta = MetaLearnerParams::init(dim, reduction, rng)?;
    let h = meta.hidden();
    meta.bn_scale = uniform(rng, h, 0.5, 1.5);
    meta.bn_shift = uniform(rng, h, -0.3, 0.3);
    meta.bn_running_mean = uniform(rng, h, -0.5, 0.5);
    meta.bn_running_var = uniform(rng, h, 0.5, 1.5);
    Ok(meta)
}

fn random_temp(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(1.0..10.0)
}

fn random_kind(rng: &mut ChaCha8Rng) -> SimilarityKind {
    SimilarityKind::ALL[rng.gen_range(0..SimilarityKind::ALL.len())]
}

fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p).flat_map(|c| std::iter::repeat(c).take(k)).collect()
}

/// Writes the per-slot input gradients of `r` into `grad`.
fn scatter_slots(r: &LossResult, slots: &[(usize, &Segment)], grad: &mut [f64]) {
    for (slot, seg) in slots {
        if let Some(g) = r.grad(*slot) {
            seg.of_mut(grad).copy_from_slice(g);
        }
    }
}

fn build_problem(
    target: GradTarget,
    trial: usize,
    shape: SuiteShape,
    tol: Tolerance,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Problem>> {
    let d = shape.dim;
    let n_classes = rng.gen_range(2..=shape.p.max(2));
    let mut pk = Packer::default();
    let problem = match target {
        GradTarget::Similarity => {
            let kind = SimilarityKind::ALL[trial % SimilarityKind::ALL.len()];
            let a = pk.push("a", &uniform(rng, d, -1.0, 1.0));
            let b = pk.push("b", &uniform(rng, d, -1.0, 1.0));
            let n = pk.values.len();
            pk.finish(Box::new(move |x| {
                let (v, ga, gb) = similarity_with_grad(a.of(x), b.of(x), kind)?;
                let mut g = vec![0.0; n];
                a.of_mut(&mut g).copy_from_slice(&ga);
                b.of_mut(&mut g).copy_from_slice(&gb);
                Ok((v, g))
            }))
        }
        GradTarget::Unified => {
            let kind = random_kind(rng);
            let refs_n = rng.gen_range(1..=4);
            let target = rng.gen_range(0..refs_n);
            let anchor = pk.push("anchor", &uniform(rng, d, -1.0, 1.0));
            let refs: Vec<Segment> =
                (0..refs_n).map(|k| pk.push(format!("ref{k}"), &uniform(rng, d, -1.0, 1.0))).collect();
            let s = pk.push("inv_temp", &[random_temp(rng)]);
            let n = pk.values.len();
            pk.finish(Box::new(move |x| {
                let rs: Vec<&[f64]> = refs.iter().map(|r| r.of(x)).collect();
                let temp = InverseTemperature::new(s.of(x)[0], true)?;
                let r = unified_loss(anchor.of(x), &rs, target, temp, kind)?;
                let mut g = vec![0.0; n];
                let mut slots = vec![(0, &anchor)];
                slots.extend(refs.iter().enumerate().map(|(k, seg)| (k + 1, seg)));
                scatter_slots(&r, &slots, &mut g);
                s.of_mut(&mut g)[0] = r.grad_params.inv_temp;
                Ok((r.value, g))
            }))
        }
        GradTarget::Classification => {
            let c = rng.gen_range(2..=6);
            let label = rng.gen_range(0..c);
            let xs = pk.push("x", &uniform(rng, d, -1.0, 1.0));
            let w = pk.push("classifier", &uniform(rng, d * c, -0.5, 0.5));
            let s = pk.push("cls_inv_temp", &[random_temp(rng)]);
            let n = pk.values.len();
            pk.finish(Box::new(move |x| {
                let weights = ClassifierWeights::new(Matrix::from_vec(d, c, w.of(x).to_vec())?)?;
                let temp = InverseTemperature::new(s.of(x)[0], true)?;
                let r = classification_loss(xs.of(x), &weights, label, temp)?;
                let mut g = vec![0.0; n];
                scatter_slots(&r, &[(0, &xs)], &mut g);
                let gw = r.grad_params.classifier.as_ref().expect("classifier gradient");
                w.of_mut(&mut g).copy_from_slice(gw.as_slice());
                s.of_mut(&mut g)[0] = r.grad_params.cls_inv_temp;
                Ok((r.value, g))
            }))
        }
        GradTarget::TripletHard | GradTarget::TripletSoft => {
            let sp: f64 = rng.gen_range(-1.0..1.0);
            let sn: f64 = rng.gen_range(-1.0..1.0);
            let margin: f64 = 0.3;
            let hard = target == GradTarget::TripletHard;
            if hard && (margin + sn - sp).abs() < 10.0 * tol.eps {
                return Ok(None);
            }
            let pos = pk.push("s_pos", &[sp]);
            let neg = pk.push("s_neg", &[sn]);
            pk.finish(Box::new(move |x| {
                let r = if hard {
                    triplet_hard_margin(pos.of(x)[0], neg.of(x)[0], margin)?
                } else {
                    triplet_soft_margin(pos.of(x)[0], neg.of(x)[0])?
                };
                let mut g = vec![0.0; 2];
                scatter_slots(&r, &[(0, &pos), (1, &neg)], &mut g);
                Ok((r.value, g))
            }))
        }
        GradTarget::NTuple | GradTarget::PnTuple | GradTarget::MetaNTuple => {
            let kind = random_kind(rng);
            let anchor = pk.push("anchor", &uniform(rng, d, -1.0, 1.0));
            let pos = pk.push("positive", &uniform(rng, d, -1.0, 1.0));
            let negs: Vec<Segment> = (0..n_classes - 1)
                .map(|k| pk.push(format!("negative{k}"), &uniform(rng, d, -1.0, 1.0)))
                .collect();
            let s = pk.push("inv_temp", &[random_temp(rng)]);
            let meta = if target == GradTarget::MetaNTuple {
                let base = random_meta(d, shape.reduction, rng)?;
                let range = pk.push_meta(&base);
                Some((base, range))
            } else {
                None
            };
            let n = pk.values.len();
            pk.finish(Box::new(move |x| {
                let ns: Vec<&[f64]> = negs.iter().map(|r| r.of(x)).collect();
                let temp = InverseTemperature::new(s.of(x)[0], true)?;
                let r = match (&meta, target) {
                    (Some((base, range)), _) => {
                        let params = with_meta(base, range, x)?;
                        meta_ntuple_loss(anchor.of(x), pos.of(x), &ns, &params, temp)?
                    }
                    (None, GradTarget::PnTuple) => pn_tuple_loss(anchor.of(x), pos.of(x), &ns, temp)?,
                    _ => ntuple_loss(anchor.of(x), pos.of(x), &ns, temp, kind)?,
                };
                let mut g = vec![0.0; n];
                let mut slots = vec![(0, &anchor), (1, &pos)];
                slots.extend(negs.iter().enumerate().map(|(k, seg)| (k + 2, seg)));
                scatter_slots(&r, &slots, &mut g);
                s.of_mut(&mut g)[0] = r.grad_params.inv_temp;
                if let Some((_, range)) = &meta {
                    let gm = r.grad_params.meta.as_ref().expect("meta gradient").flatten();
                    g[range.clone()].copy_from_slice(&gm);
                }
                Ok((r.value, g))
            }))
        }
        GradTarget::MpnTuple => {
            let anchor_class = rng.gen_range(0..n_classes);
            let anchor = pk.push("anchor", &uniform(rng, d, -1.0, 1.0));
            let protos: Vec<Segment> = (0..n_classes)
                .map(|c| pk.push(format!("prototype{c}"), &uniform(rng, d, -1.0, 1.0)))
                .collect();
            let s = pk.push("inv_temp", &[random_temp(rng)]);
            let n = pk.values.len();
            pk.finish(Box::new(move |x| {
                let set = PrototypeSet {
                    classes: protos
                        .iter()
                        .enumerate()
                        .map(|(c, seg)| (c, Prototype { vector: seg.of(x).to_vec(), members: vec![c] }))
                        .collect(),
                };
                let temp = InverseTemperature::new(s.of(x)[0], true)?;
                let r = mpn_tuple_loss(anchor.of(x), &set, anchor_class, temp)?;
                let mut g = vec![0.0; n];
                let mut slots = vec![(0, &anchor)];
                slots.extend(protos.iter().enumerate().map(|(c, seg)| (c + 1, seg)));
                scatter_slots(&r, &slots, &mut g);
                s.of_mut(&mut g)[0] = r.grad_params.inv_temp;
                Ok((r.value, g))
            }))
        }
        GradTarget::MetaForwardTrain | GradTarget::MetaForwardEval | GradTarget::Prototypes => {
            let b = shape.p * shape.k;
            let labels = pk_labels(shape.p, shape.k);
            let mode = if target == GradTarget::MetaForwardEval { Mode::Eval } else { Mode::Train };
            let base = random_meta(d, shape.reduction, rng)?;
            let feats = pk.push("inputs", &uniform(rng, b * d, -1.0, 1.0));
            let range = pk.push_meta(&base);
            let n = pk.values.len();
            if target == GradTarget::Prototypes {
                // random linear readout of every prototype
                let exclude = rng.gen_bool(0.5).then(|| rng.gen_range(0..b));
                let readout = Matrix::from_vec(shape.p, d, uniform(rng, shape.p * d, -1.0, 1.0))?;
                pk.finish(Box::new(move |x| {
                    let params = with_meta(&base, &range, x)?;
                    let inputs = Matrix::from_vec(b, d, feats.of(x).to_vec())?;
                    let batch = EmbeddingBatch::new(inputs.clone(), labels.clone())?;
                    let set = compute_prototypes(&batch, &params, mode, exclude)?;
                    let mut value = 0.0;
                    let mut d_mapped = Matrix::zeros(b, d);
                    for (c, proto) in &set.classes {
                        value += crate::math::dot(readout.row(*c), &proto.vector);
                        let share = 1.0 / proto.member_count() as f64;
                        for &r in &proto.members {
                            crate::math::axpy(share, readout.row(*c), d_mapped.row_mut(r));
                        }
                    }
                    let fwd = params.forward_batch(&inputs, mode)?;
                    let (d_in, gm) = params.backward_batch(&fwd.cache, &d_mapped)?;
                    let mut g = vec![0.0; n];
                    feats.of_mut(&mut g).copy_from_slice(d_in.as_slice());
                    g[range.clone()].copy_from_slice(&gm.flatten());
                    Ok((value, g))
                }))
            } else {
                let readout = Matrix::from_vec(b, d, uniform(rng, b * d, -1.0, 1.0))?;
                pk.finish(Box::new(move |x| {
                    let params = with_meta(&base, &range, x)?;
                    let inputs = Matrix::from_vec(b, d, feats.of(x).to_vec())?;
                    let fwd = params.forward_batch(&inputs, mode)?;
                    let value: f64 = crate::math::dot(fwd.output.as_slice(), readout.as_slice());
                    let (d_in, gm) = params.backward_batch(&fwd.cache, &readout)?;
                    let mut g = vec![0.0; n];
                    feats.of_mut(&mut g).copy_from_slice(d_in.as_slice());
                    g[range.clone()].copy_from_slice(&gm.flatten());
                    Ok((value, g))
                }))
            }
        }
        GradTarget::MpnThroughMeta | GradTarget::Combined => {
            let b = shape.p * shape.k;
            let labels = pk_labels(shape.p, shape.k);
            let kind = if target == GradTarget::MpnThroughMeta {
                TupleKind::MpnTuple
            } else {
                TupleKind::ALL[trial % TupleKind::ALL.len()]
            };
            let config = LossConfig {
                cls_weight: if target == GradTarget::Combined { rng.gen_range(0.1..2.0) } else { 0.0 },
                tuple_weight: rng.gen_range(0.1..2.0),
                tuple_kind: kind,
                n_classes: if kind.is_triplet() { 2 } else { n_classes },
                similarity: if kind.uses_prototypes() { SimilarityKind::Cosine } else { random_kind(rng) },
                mining: if kind.is_triplet() && rng.gen_bool(0.5) { Mining::BatchHard } else { Mining::All },
                margin: 0.3,
                samples: None,
                include_anchor_in_prototype: rng.gen_bool(0.25),
            };
            let features = Matrix::from_vec(b, d, uniform(rng, b * d, -1.0, 1.0))?;
            let batch = EmbeddingBatch::new(features, labels.clone())?;
            let selection = select_tuples(&batch, &config, rng)?;
            let classifier = uniform(rng, d * shape.p, -0.5, 0.5);
            let base = random_meta(d, shape.reduction, rng)?;
            let cls_s = random_temp(rng);
            let tuple_s = random_temp(rng);

            if kind == TupleKind::HardTriplet && hinge_near_kink(&batch, &config, &selection, tuple_s, tol)? {
                return Ok(None);
            }

            let feats = pk.push("features", batch.features.as_slice());
            let cls = pk.push("classifier", &classifier);
            let meta_range = pk.push_meta(&base);
            let cls_temp = pk.push("cls_inv_temp", &[cls_s]);
            let tuple_temp = pk.push("inv_temp", &[tuple_s]);
            let n = pk.values.len();
            pk.finish(Box::new(move |x| {
                let meta = with_meta(&base, &meta_range, x)?;
                let classifier = ClassifierWeights::new(Matrix::from_vec(d, shape.p, cls.of(x).to_vec())?)?;
                let batch = EmbeddingBatch::new(Matrix::from_vec(b, d, feats.of(x).to_vec())?, labels.clone())?;
                let params = LossParams {
                    classifier: &classifier,
                    meta: &meta,
                    cls_temp: InverseTemperature::new(cls_temp.of(x)[0], true)?,
                    tuple_temp: InverseTemperature::new(tuple_temp.of(x)[0], true)?,
                };
                let out = batch_loss_with_tuples(&batch, &params, &config, &selection)?;
                let r = &out.result;
                let mut g = vec![0.0; n];
                for (row, gx) in &r.grad_inputs {
                    feats.of_mut(&mut g)[row * d..(row + 1) * d].copy_from_slice(gx);
                }
                if let Some(gc) = &r.grad_params.classifier {
                    cls.of_mut(&mut g).copy_from_slice(gc.as_slice());
                }
                if let Some(gm) = &r.grad_params.meta {
                    g[meta_range.clone()].copy_from_slice(&gm.flatten());
                }
                cls_temp.of_mut(&mut g)[0] = r.grad_params.cls_inv_temp;
                tuple_temp.of_mut(&mut g)[0] = r.grad_params.inv_temp;
                Ok((r.value, g))
            }))
        }
    };
    Ok(Some(problem))
}

/// Whether any selected hinge sits within reach of its kink under the
/// finite-difference perturbation.
fn hinge_near_kink(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    selection: &crate::objective::TupleSelection,
    s: f64,
    tol: Tolerance,
) -> Result<bool> {
    let crate::objective::TupleSelection::Instances(tuples) = selection else {
        return Ok(false);
    };
    let x = &batch.features;
    // with entries in [-1, 1] every similarity moves by at most eps per
    // coordinate step, and an anchor step moves both terms
    let reach = 10.0 * tol.eps * 2.0 * s;
    for t in tuples {
        let sp = crate::math::similarity(x.row(t.anchor), x.row(t.positive), config.similarity)?;
        let sn = crate::math::similarity(x.row(t.anchor), x.row(t.negatives[0]), config.similarity)?;
        if (config.margin + s * sn - s * sp).abs() < reach {
            return Ok(true);
        }
    }
    Ok(false)
}
