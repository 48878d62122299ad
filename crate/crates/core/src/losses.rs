//! Softmax-form metric-learning losses and their analytic gradients.
//!
//! Every loss here is an instance of one template: an anchor is compared
//! with a set of reference nodes through a similarity `S`, the similarities
//! are scaled by an inverse temperature `s`, and the loss is the negative
//! log-probability of the correct reference under a softmax:
//!
//! ```text
//! L = -log( exp(s·S(x_a, c_t)) / Σ_k exp(s·S(x_a, c_k)) )
//! ```
//!
//! The losses differ only in what the reference nodes are: classifier
//! columns (classification), a positive and one negative instance
//! (soft-margin triplet), a positive and several negatives (N-tuple), class
//! means (PN-tuple) or class means of meta-learner outputs (MPN-tuple).
//!
//! Each function returns a [`LossResult`] whose `grad_inputs` is keyed by
//! input slot. The slot layout is documented on each function.

use std::collections::BTreeMap;

use crate::error::{domain, shape, Error, Result};
use crate::math::{similarity_with_grad, sigmoid, softplus, Matrix, SimilarityKind, Vector};
use crate::meta::{MetaGrads, MetaLearnerParams, Mode, PrototypeSet};

/// Default initial value of a trainable inverse temperature.
pub const DEFAULT_INV_TEMP: f64 = 10.0;

/// Logit scale `s = 1/τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseTemperature {
    pub s: f64,
    pub trainable: bool,
}

impl InverseTemperature {
    pub fn new(s: f64, trainable: bool) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(domain(format!("inverse temperature must be positive, got {s}")));
        }
        Ok(Self { s, trainable })
    }

    pub fn fixed(s: f64) -> Self {
        Self::new(s, false).expect("positive inverse temperature")
    }

    pub fn unit() -> Self {
        Self::fixed(1.0)
    }
}

impl Default for InverseTemperature {
    fn default() -> Self {
        Self { s: DEFAULT_INV_TEMP, trainable: true }
    }
}

/// Classifier weight matrix `W_b`, `d × C`; column `k` is the reference node
/// of class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub weights: Matrix,
}

impl ClassifierWeights {
    pub fn new(weights: Matrix) -> Result<Self> {
        if weights.cols() == 0 || weights.rows() == 0 {
            return Err(shape("classifier needs at least one class and one feature"));
        }
        Ok(Self { weights })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Gradients with respect to trainable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    /// `∂L/∂s` of the instance/prototype term's inverse temperature.
    pub inv_temp: f64,
    /// `∂L/∂s` of the classification term's inverse temperature.
    pub cls_inv_temp: f64,
    pub classifier: Option<Matrix>,
    pub meta: Option<MetaGrads>,
}

impl ParamGrads {
    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamGrads) {
        self.inv_temp += alpha * other.inv_temp;
        self.cls_inv_temp += alpha * other.cls_inv_temp;
        if let Some(g) = &other.classifier {
            match &mut self.classifier {
                Some(acc) => acc.add_scaled(alpha, g),
                None => {
                    let mut acc = Matrix::zeros(g.rows(), g.cols());
                    acc.add_scaled(alpha, g);
                    self.classifier = Some(acc);
                }
            }
        }
        if let Some(g) = &other.meta {
            match &mut self.meta {
                Some(acc) => acc.add_scaled(alpha, g),
                None => self.meta = Some(g.scaled(alpha)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Gradient per input slot.
    pub grad_inputs: BTreeMap<usize, Vector>,
    pub grad_params: ParamGrads,
}

impl LossResult {
    fn scalar(value: f64) -> Self {
        Self { value, grad_inputs: BTreeMap::new(), grad_params: ParamGrads::default() }
    }

    pub fn grad(&self, slot: usize) -> Option<&[f64]> {
        self.grad_inputs.get(&slot).map(Vec::as_slice)
    }
}

/// Softmax cross-entropy over `s · sims` with target `target`.
///
/// Returns the loss, `∂L/∂sims` and `∂L/∂s`. The value is evaluated as
/// `(max − z_t) + ln Σ exp(z − max)`, a sum of two non-negative terms.
pub(crate) fn softmax_xent(sims: &[f64], target: usize, s: f64) -> Result<(f64, Vector, f64)> {
    if sims.is_empty() {
        return Err(shape("softmax over an empty reference set"));
    }
    if target >= sims.len() {
        return Err(Error::Index(format!("target {target} out of {} references", sims.len())));
    }
    let logits: Vector = sims.iter().map(|v| s * v).collect();
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {v}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vector = logits.iter().map(|z| (z - max).exp()).collect();
    let sum = exps.iter().fold(0.0, |acc, e| acc + e);
    let value = (max - logits[target]) + sum.ln();
    let mut d_sims = Vec::with_capacity(sims.len());
    let mut d_s = 0.0;
    for (k, e) in exps.iter().enumerate() {
        let coef = e / sum - if k == target { 1.0 } else { 0.0 };
        d_sims.push(s * coef);
        d_s += coef * sims[k];
    }
    Ok((value, d_sims, d_s))
}

/// The softmax probabilities implied by `s · sims`.
pub fn reference_probabilities(sims: &[f64], s: f64) -> Result<Vector> {
    let logits: Vector = sims.iter().map(|v| s * v).collect();
    Ok(crate::math::log_softmax(&logits)?.into_iter().map(f64::exp).collect())
}

/// Unified loss: `-log softmax(s · S(anchor, refs))[target]`.
///
/// Slots: `0` is the anchor, `1 + k` is `refs[k]`.
pub fn unified_loss(
    anchor: &[f64],
    refs: &[&[f64]],
    target: usize,
    temp: InverseTemperature,
    kind: SimilarityKind,
) -> Result<LossResult> {
    if refs.is_empty() {
        return Err(shape("unified loss needs at least one reference node"));
    }
    if target >= refs.len() {
        return Err(Error::Index(format!("target {target} out of {} references", refs.len())));
    }
    let mut sims = Vec::with_capacity(refs.len());
    let mut grads = Vec::with_capacity(refs.len());
    for r in refs {
        let (s, ga, gr) = similarity_with_grad(anchor, r, kind)?;
        sims.push(s);
        grads.push((ga, gr));
    }
    let (value, d_sims, d_s) = softmax_xent(&sims, target, temp.s)?;
    let mut grad_anchor = vec![0.0; anchor.len()];
    let mut grad_inputs = BTreeMap::new();
    for (k, ((ga, gr), ds)) in grads.into_iter().zip(&d_sims).enumerate() {
        crate::math::axpy(*ds, &ga, &mut grad_anchor);
        grad_inputs.insert(k + 1, gr.into_iter().map(|v| v * ds).collect());
    }
    grad_inputs.insert(0, grad_anchor);
    Ok(LossResult {
        value,
        grad_inputs,
        grad_params: ParamGrads { inv_temp: d_s, ..ParamGrads::default() },
    })
}

/// Conventional classification loss with inner-product similarity against
/// the classifier columns.
///
/// Slot `0` is `x`; the weight gradient is in `grad_params.classifier` and
/// the temperature gradient in `grad_params.cls_inv_temp`.
pub fn classification_loss(
    x: &[f64],
    weights: &ClassifierWeights,
    label: usize,
    temp: InverseTemperature,
) -> Result<LossResult> {
    let c = weights.num_classes();
    if label >= c {
        return Err(Error::Index(format!("label {label} out of {c} classes")));
    }
    if x.len() != weights.dim() {
        return Err(shape(format!(
            "feature length {} but classifier columns have length {}",
            x.len(),
            weights.dim()
        )));
    }
    let sims = weights.weights.matvec_t(x)?;
    let (value, d_sims, d_s) = softmax_xent(&sims, label, temp.s)?;
    let grad_x = weights.weights.matvec(&d_sims)?;
    let mut grad_w = Matrix::zeros(weights.dim(), c);
    grad_w.add_outer(1.0, x, &d_sims);
    Ok(LossResult {
        value,
        grad_inputs: BTreeMap::from([(0, grad_x)]),
        grad_params: ParamGrads {
            cls_inv_temp: d_s,
            classifier: Some(grad_w),
            ..ParamGrads::default()
        },
    })
}

/// Hinge triplet loss `max(m + s_neg − s_pos, 0)`.
///
/// Slots: `0` is `s_pos`, `1` is `s_neg` (length-1 vectors). The subgradient
/// at the kink is zero.
pub fn triplet_hard_margin(s_pos: f64, s_neg: f64, margin: f64) -> Result<LossResult> {
    if !(s_pos.is_finite() && s_neg.is_finite() && margin.is_finite()) {
        return Err(Error::Numeric("non-finite triplet input".into()));
    }
    if margin < 0.0 {
        return Err(domain(format!("margin must be non-negative, got {margin}")));
    }
    let arg = margin + s_neg - s_pos;
    let mut out = LossResult::scalar(arg.max(0.0));
    let active = if arg > 0.0 { 1.0 } else { 0.0 };
    out.grad_inputs.insert(0, vec![-active]);
    out.grad_inputs.insert(1, vec![active]);
    Ok(out)
}

/// Soft-margin triplet loss `ln(1 + exp(s_neg − s_pos))`.
///
/// Slots as in [`triplet_hard_margin`].
pub fn triplet_soft_margin(s_pos: f64, s_neg: f64) -> Result<LossResult> {
    if !(s_pos.is_finite() && s_neg.is_finite()) {
        return Err(Error::Numeric("non-finite triplet input".into()));
    }
    let diff = s_neg - s_pos;
    let g = sigmoid(diff);
    let mut out = LossResult::scalar(softplus(diff));
    out.grad_inputs.insert(0, vec![-g]);
    out.grad_inputs.insert(1, vec![g]);
    Ok(out)
}

/// The soft-margin triplet loss written as a two-class softmax,
/// `−ln(e^{s_pos} / (e^{s_pos} + e^{s_neg}))`.
pub fn triplet_soft_margin_softmax(s_pos: f64, s_neg: f64) -> Result<f64> {
    Ok(softmax_xent(&[s_pos, s_neg], 0, 1.0)?.0)
}

/// N-tuple loss: one positive and `negatives.len()` negatives from distinct
/// classes, scored jointly under one softmax.
///
/// Slots: `0` anchor, `1` positive, `2 + k` negative `k`.
pub fn ntuple_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temp: InverseTemperature,
    kind: SimilarityKind,
) -> Result<LossResult> {
    if negatives.is_empty() {
        return Err(shape("N-tuple loss needs at least one negative"));
    }
    let mut refs: Vec<&[f64]> = Vec::with_capacity(negatives.len() + 1);
    refs.push(positive);
    refs.extend_from_slice(negatives);
    unified_loss(anchor, &refs, 0, temp, kind)
}

/// Prototype N-tuple loss: the N-tuple loss with class-mean prototypes as
/// reference nodes, under cosine similarity.
///
/// Slots as in [`ntuple_loss`], with prototypes in place of instances.
pub fn pn_tuple_loss(
    anchor: &[f64],
    proto_pos: &[f64],
    proto_negs: &[&[f64]],
    temp: InverseTemperature,
) -> Result<LossResult> {
    ntuple_loss(anchor, proto_pos, proto_negs, temp, SimilarityKind::Cosine)
}

/// Meta prototypical N-tuple loss against a set of mapped-feature
/// prototypes. The anchor's class is the positive; every other class in
/// `prototypes` is a negative.
///
/// Slots: `0` is the anchor, `1 + i` is the prototype of the `i`-th class
/// of `prototypes` in ascending class order. Chain the prototype gradients
/// through the meta-learner with [`crate::objective`] for end-to-end
/// gradients.
pub fn mpn_tuple_loss(
    anchor: &[f64],
    prototypes: &PrototypeSet,
    anchor_class: usize,
    temp: InverseTemperature,
) -> Result<LossResult> {
    if prototypes.len() < 2 {
        return Err(shape("MPN-tuple loss needs the anchor class and at least one other class"));
    }
    let pos_slot = prototypes
        .position(anchor_class)
        .ok_or_else(|| domain(format!("anchor class {anchor_class} has no prototype")))?;
    let refs: Vec<&[f64]> = prototypes.classes.values().map(|p| p.vector.as_slice()).collect();
    unified_loss(anchor, &refs, pos_slot, temp, SimilarityKind::Cosine)
}

/// Meta N-tuple loss: a positive and negatives mapped through the
/// meta-learner (eval-mode normalization) and compared with the raw anchor.
///
/// Slots: `0` anchor, `1` positive, `2 + k` negative `k`; meta-learner
/// gradients are in `grad_params.meta`.
pub fn meta_ntuple_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    params: &MetaLearnerParams,
    temp: InverseTemperature,
) -> Result<LossResult> {
    if negatives.is_empty() {
        return Err(shape("meta N-tuple loss needs at least one negative"));
    }
    let mut rows: Vec<Vector> = vec![positive.to_vec()];
    rows.extend(negatives.iter().map(|n| n.to_vec()));
    let inputs = Matrix::from_rows(&rows)?;
    let fwd = params.forward_batch(&inputs, Mode::Eval)?;
    let mapped: Vec<&[f64]> = (0..inputs.rows()).map(|i| fwd.output.row(i)).collect();
    let inner = unified_loss(anchor, &mapped, 0, temp, SimilarityKind::Cosine)?;

    let mut d_mapped = Matrix::zeros(inputs.rows(), params.dim);
    for i in 0..inputs.rows() {
        d_mapped.row_mut(i).copy_from_slice(&inner.grad_inputs[&(i + 1)]);
    }
    let (d_inputs, meta_grads) = params.backward_batch(&fwd.cache, &d_mapped)?;
    let mut grad_inputs = BTreeMap::from([(0, inner.grad_inputs[&0].clone())]);
    for i in 0..inputs.rows() {
        grad_inputs.insert(i + 1, d_inputs.row(i).to_vec());
    }
    Ok(LossResult {
        value: inner.value,
        grad_inputs,
        grad_params: ParamGrads {
            inv_temp: inner.grad_params.inv_temp,
            meta: Some(meta_grads),
            ..ParamGrads::default()
        },
    })
}
