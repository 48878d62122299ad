//! Batch-level objective: classification loss plus one tuple loss, with
//! gradients accumulated into every batch row and every parameter.
//!
//! Instance tuples (triplets, N-tuples) share one pairwise similarity table
//! per batch: each tuple only adds `∂L/∂S_ij` coefficients, and the
//! similarity gradients are applied once per pair at the end. Prototype
//! tuples share per-class sums in the same way.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::batch::{class_members, EmbeddingBatch};
use crate::error::{domain, Error, Result};
use crate::losses::{
    classification_loss, softmax_xent, triplet_hard_margin, triplet_soft_margin, ClassifierWeights,
    InverseTemperature, LossResult, ParamGrads,
};
use crate::math::{axpy, similarity, similarity_with_grad, Matrix, SimilarityKind};
use crate::meta::{BatchStats, MetaLearnerParams, Mode};
use crate::sampling::{
    batch_hard_mining, count_batch_prototype_tuples, count_batch_tuples, enumerate_prototype_tuples,
    enumerate_tuples, sample_prototype_tuples, sample_tuples, PrototypeTuple, TupleIndex,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TupleKind {
    SoftTriplet,
    HardTriplet,
    NTuple,
    PnTuple,
    MpnTuple,
}

impl TupleKind {
    pub const ALL: [TupleKind; 5] = [
        TupleKind::SoftTriplet,
        TupleKind::HardTriplet,
        TupleKind::NTuple,
        TupleKind::PnTuple,
        TupleKind::MpnTuple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TupleKind::SoftTriplet => "soft_triplet",
            TupleKind::HardTriplet => "hard_triplet",
            TupleKind::NTuple => "ntuple",
            TupleKind::PnTuple => "pn_tuple",
            TupleKind::MpnTuple => "mpn_tuple",
        }
    }

    pub fn is_triplet(self) -> bool {
        matches!(self, TupleKind::SoftTriplet | TupleKind::HardTriplet)
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, TupleKind::PnTuple | TupleKind::MpnTuple)
    }
}

impl fmt::Display for TupleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TupleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown tuple loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mining {
    /// Every tuple, or `M` uniformly sampled ones when there are more.
    All,
    /// Hardest positive and negative per anchor (triplets only).
    BatchHard,
}

impl Mining {
    pub fn name(self) -> &'static str {
        match self {
            Mining::All => "all",
            Mining::BatchHard => "batch_hard",
        }
    }
}

impl FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Mining::All),
            "batch_hard" => Ok(Mining::BatchHard),
            other => Err(Error::Parse(format!("unknown mining mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub tuple_weight: f64,
    pub tuple_kind: TupleKind,
    /// Classes per tuple: the anchor's plus `n_classes - 1` negatives.
    pub n_classes: usize,
    /// Similarity for instance tuples; prototype tuples always use cosine.
    pub similarity: SimilarityKind,
    pub mining: Mining,
    pub margin: f64,
    /// `M`, the tuple budget per batch. `None` uses the batch's triplet count.
    pub samples: Option<usize>,
    /// Keep the anchor inside its own positive prototype.
    pub include_anchor_in_prototype: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            tuple_weight: 1.0,
            tuple_kind: TupleKind::SoftTriplet,
            n_classes: 2,
            similarity: SimilarityKind::Cosine,
            mining: Mining::All,
            margin: 0.3,
            samples: None,
            include_anchor_in_prototype: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cls_weight >= 0.0 && self.tuple_weight >= 0.0) {
            return Err(domain("loss weights must be non-negative"));
        }
        if self.n_classes < 2 {
            return Err(domain(format!("a tuple needs at least 2 classes, got {}", self.n_classes)));
        }
        if self.tuple_kind.is_triplet() && self.n_classes != 2 {
            return Err(domain(format!(
                "{} uses exactly 2 classes, got N = {}",
                self.tuple_kind, self.n_classes
            )));
        }
        if self.mining == Mining::BatchHard && !self.tuple_kind.is_triplet() {
            return Err(domain("batch-hard mining is only defined for triplets"));
        }
        if !(self.margin >= 0.0) {
            return Err(domain("margin must be non-negative"));
        }
        Ok(())
    }

    pub fn tuple_active(&self) -> bool {
        self.tuple_weight > 0.0
    }

    pub fn cls_active(&self) -> bool {
        self.cls_weight > 0.0
    }
}

/// Parameters the objective reads.
#[derive(Debug, Clone, Copy)]
pub struct LossParams<'a> {
    pub classifier: &'a ClassifierWeights,
    pub meta: &'a MetaLearnerParams,
    pub cls_temp: InverseTemperature,
    pub tuple_temp: InverseTemperature,
}

/// Tuples chosen for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TupleSelection {
    Instances(Vec<TupleIndex>),
    Prototypes(Vec<PrototypeTuple>),
}

impl TupleSelection {
    pub fn len(&self) -> usize {
        match self {
            TupleSelection::Instances(t) => t.len(),
            TupleSelection::Prototypes(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Weighted total; `grad_inputs` is keyed by batch row.
    pub result: LossResult,
    /// Unweighted mean classification loss.
    pub cls_value: f64,
    /// Unweighted mean tuple loss.
    pub tuple_value: f64,
    pub tuple_count: usize,
    /// Meta-learner batch statistics, for the running-average update.
    pub bn_stats: Option<BatchStats>,
}

/// Pairwise similarity table `S[i][j] = S(x_i, x_j)`.
pub fn similarity_matrix(features: &Matrix, kind: SimilarityKind) -> Result<Matrix> {
    let n = features.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, similarity(features.row(i), features.row(j), kind)?);
        }
    }
    Ok(out)
}

/// Picks the tuples the tuple term will score on this batch.
pub fn select_tuples<R: Rng + ?Sized>(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    rng: &mut R,
) -> Result<TupleSelection> {
    config.validate()?;
    let labels = &batch.labels;
    let n_batch_classes = class_members(labels).len();
    if config.n_classes > n_batch_classes {
        return Err(domain(format!(
            "N = {} exceeds the {n_batch_classes} identities in the batch",
            config.n_classes
        )));
    }
    let budget = match config.samples {
        Some(m) => m as u128,
        None => count_batch_tuples(labels, 2)?,
    };
    if config.tuple_kind.uses_prototypes() {
        let total = count_batch_prototype_tuples(labels, config.n_classes)?;
        let tuples = if total <= budget {
            enumerate_prototype_tuples(labels, config.n_classes)?
        } else {
            sample_prototype_tuples(labels, config.n_classes, budget as usize, rng)?
        };
        return Ok(TupleSelection::Prototypes(tuples));
    }
    let tuples = match config.mining {
        Mining::BatchHard => {
            let sim = similarity_matrix(&batch.features, config.similarity)?;
            batch_hard_mining(&sim, labels)?
        }
        Mining::All => {
            let total = count_batch_tuples(labels, config.n_classes)?;
            if total <= budget {
                enumerate_tuples(labels, config.n_classes)?
            } else {
                sample_tuples(labels, config.n_classes, budget as usize, rng)?
            }
        }
    };
    Ok(TupleSelection::Instances(tuples))
}

/// Weighted sum of the mean classification loss and the mean tuple loss.
pub fn combined_batch_loss<R: Rng + ?Sized>(
    batch: &EmbeddingBatch,
    params: &LossParams<'_>,
    config: &LossConfig,
    rng: &mut R,
) -> Result<BatchLoss> {
    config.validate()?;
    let selection = if config.tuple_active() {
        select_tuples(batch, config, rng)?
    } else {
        TupleSelection::Instances(Vec::new())
    };
    batch_loss_with_tuples(batch, params, config, &selection)
}

/// [`combined_batch_loss`] with a fixed tuple selection. Deterministic.
pub fn batch_loss_with_tuples(
    batch: &EmbeddingBatch,
    params: &LossParams<'_>,
    config: &LossConfig,
    selection: &TupleSelection,
) -> Result<BatchLoss> {
    config.validate()?;
    let n = batch.len();
    let d = batch.dim();
    let mut grad_x = Matrix::zeros(n, d);
    let mut grads = ParamGrads::default();
    let mut total = 0.0;

    let mut cls_value = 0.0;
    if config.cls_active() {
        let (value, gx, g) = classification_term(batch, params)?;
        cls_value = value;
        total += config.cls_weight * value;
        grad_x.add_scaled(config.cls_weight, &gx);
        grads.add_scaled(config.cls_weight, &g);
    }

    let mut tuple_value = 0.0;
    let mut bn_stats = None;
    if config.tuple_active() && !selection.is_empty() {
        let term = match selection {
            TupleSelection::Instances(tuples) => instance_term(batch, params, config, tuples)?,
            TupleSelection::Prototypes(tuples) => prototype_term(batch, params, config, tuples)?,
        };
        tuple_value = term.value;
        bn_stats = term.bn_stats;
        total += config.tuple_weight * term.value;
        grad_x.add_scaled(config.tuple_weight, &term.grad_x);
        grads.add_scaled(config.tuple_weight, &term.grads);
    }

    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite batch loss (classification {cls_value}, tuple {tuple_value})"
        )));
    }
    let grad_inputs: BTreeMap<usize, Vec<f64>> =
        (0..n).map(|i| (i, grad_x.row(i).to_vec())).collect();
    Ok(BatchLoss {
        result: LossResult { value: total, grad_inputs, grad_params: grads },
        cls_value,
        tuple_value,
        tuple_count: selection.len(),
        bn_stats,
    })
}

fn classification_term(batch: &EmbeddingBatch, params: &LossParams<'_>) -> Result<(f64, Matrix, ParamGrads)> {
    let n = batch.len();
    let inv = 1.0 / n as f64;
    let mut grad_x = Matrix::zeros(n, batch.dim());
    let mut grads = ParamGrads::default();
    let mut value = 0.0;
    for i in 0..n {
        let r = classification_loss(batch.features.row(i), params.classifier, batch.labels[i], params.cls_temp)?;
        value += r.value;
        axpy(inv, &r.grad_inputs[&0], grad_x.row_mut(i));
        grads.add_scaled(inv, &r.grad_params);
    }
    Ok((value * inv, grad_x, grads))
}

struct Term {
    value: f64,
    grad_x: Matrix,
    grads: ParamGrads,
    bn_stats: Option<BatchStats>,
}

/// Mean loss over instance tuples.
fn instance_term(
    batch: &EmbeddingBatch,
    params: &LossParams<'_>,
    config: &LossConfig,
    tuples: &[TupleIndex],
) -> Result<Term> {
    let n = batch.len();
    let x = &batch.features;
    let kind = config.similarity;
    let s = params.tuple_temp.s;
    let inv = 1.0 / tuples.len() as f64;

    let mut sim_cache: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut sim = |i: usize, j: usize| -> Result<f64> {
        if let Some(v) = sim_cache.get(&(i, j)) {
            return Ok(*v);
        }
        let v = similarity(x.row(i), x.row(j), kind)?;
        sim_cache.insert((i, j), v);
        Ok(v)
    };

    // coefficients ∂L/∂S_ij, accumulated over tuples
    let mut coef: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut value = 0.0;
    let mut d_s = 0.0;
    for t in tuples {
        let s_pos = sim(t.anchor, t.positive)?;
        match config.tuple_kind {
            TupleKind::SoftTriplet | TupleKind::HardTriplet => {
                let s_neg = sim(t.anchor, t.negatives[0])?;
                let r = if config.tuple_kind == TupleKind::SoftTriplet {
                    triplet_soft_margin(s * s_pos, s * s_neg)?
                } else {
                    triplet_hard_margin(s * s_pos, s * s_neg, config.margin)?
                };
                let (gp, gn) = (r.grad_inputs[&0][0], r.grad_inputs[&1][0]);
                value += r.value;
                d_s += gp * s_pos + gn * s_neg;
                *coef.entry((t.anchor, t.positive)).or_default() += inv * s * gp;
                *coef.entry((t.anchor, t.negatives[0])).or_default() += inv * s * gn;
            }
            TupleKind::NTuple => {
                let mut sims = vec![s_pos];
                for &j in &t.negatives {
                    sims.push(sim(t.anchor, j)?);
                }
                let (v, d_sims, ds) = softmax_xent(&sims, 0, s)?;
                value += v;
                d_s += ds;
                *coef.entry((t.anchor, t.positive)).or_default() += inv * d_sims[0];
                for (k, &j) in t.negatives.iter().enumerate() {
                    *coef.entry((t.anchor, j)).or_default() += inv * d_sims[k + 1];
                }
            }
            TupleKind::PnTuple | TupleKind::MpnTuple => {
                return Err(domain("prototype losses need prototype tuples"));
            }
        }
    }

    let mut grad_x = Matrix::zeros(n, batch.dim());
    for (&(i, j), &c) in &coef {
        if c == 0.0 {
            continue;
        }
        let (_, gi, gj) = similarity_with_grad(x.row(i), x.row(j), kind)?;
        axpy(c, &gi, grad_x.row_mut(i));
        axpy(c, &gj, grad_x.row_mut(j));
    }
    Ok(Term {
        value: value * inv,
        grad_x,
        grads: ParamGrads { inv_temp: d_s * inv, ..ParamGrads::default() },
        bn_stats: None,
    })
}

/// Mean loss over prototype tuples. PN-tuple averages raw features; MPN-tuple
/// averages meta-learner outputs computed in train mode over the whole batch.
fn prototype_term(
    batch: &EmbeddingBatch,
    params: &LossParams<'_>,
    config: &LossConfig,
    tuples: &[PrototypeTuple],
) -> Result<Term> {
    let n = batch.len();
    let d = batch.dim();
    let x = &batch.features;
    let s = params.tuple_temp.s;
    let inv = 1.0 / tuples.len() as f64;

    let meta_fwd = match config.tuple_kind {
        TupleKind::MpnTuple => Some(params.meta.forward_batch(x, Mode::Train)?),
        TupleKind::PnTuple => None,
        other => return Err(domain(format!("{other} does not use prototypes"))),
    };
    let refs = meta_fwd.as_ref().map_or(x, |f| &f.output);

    let members = class_members(&batch.labels);
    let mut class_sum: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&c, rows) in &members {
        let mut sum = vec![0.0; d];
        for &r in rows {
            axpy(1.0, refs.row(r), &mut sum);
        }
        class_sum.insert(c, sum);
    }
    let mean_of = |c: usize| -> Vec<f64> {
        let k = members[&c].len() as f64;
        class_sum[&c].iter().map(|v| v / k).collect()
    };
    let class_mean: BTreeMap<usize, Vec<f64>> = members.keys().map(|&c| (c, mean_of(c))).collect();

    let mut grad_anchor = Matrix::zeros(n, d);
    let mut grad_refs = Matrix::zeros(n, d);
    // gradient reaching each class's full mean, and the leave-anchor-out means
    let mut class_grad: BTreeMap<usize, Vec<f64>> = members.keys().map(|&c| (c, vec![0.0; d])).collect();
    let mut excl_grad: BTreeMap<usize, Vec<f64>> = members.keys().map(|&c| (c, vec![0.0; d])).collect();
    let mut value = 0.0;
    let mut d_s = 0.0;

    for t in tuples {
        let a = t.anchor;
        let own = batch.labels[a];
        let own_count = members[&own].len();
        let pos_proto: Vec<f64> = if config.include_anchor_in_prototype {
            class_mean[&own].clone()
        } else {
            if own_count < 2 {
                return Err(domain(format!(
                    "class {own} has a single sample, so excluding the anchor leaves no positive"
                )));
            }
            class_sum[&own]
                .iter()
                .zip(refs.row(a))
                .map(|(sum, r)| (sum - r) / (own_count - 1) as f64)
                .collect()
        };

        let mut sims = Vec::with_capacity(t.negative_classes.len() + 1);
        let mut sim_grads = Vec::with_capacity(t.negative_classes.len() + 1);
        let (sv, ga, gp) = similarity_with_grad(x.row(a), &pos_proto, SimilarityKind::Cosine)?;
        sims.push(sv);
        sim_grads.push((ga, gp));
        for c in &t.negative_classes {
            let (sv, ga, gp) = similarity_with_grad(x.row(a), &class_mean[c], SimilarityKind::Cosine)?;
            sims.push(sv);
            sim_grads.push((ga, gp));
        }
        let (v, d_sims, ds) = softmax_xent(&sims, 0, s)?;
        value += v;
        d_s += ds;

        for (k, (ga, gp)) in sim_grads.iter().enumerate() {
            let coef = inv * d_sims[k];
            axpy(coef, ga, grad_anchor.row_mut(a));
            if k == 0 {
                if config.include_anchor_in_prototype {
                    axpy(coef / own_count as f64, gp, class_grad.get_mut(&own).unwrap());
                } else {
                    let share = coef / (own_count - 1) as f64;
                    axpy(share, gp, excl_grad.get_mut(&own).unwrap());
                    axpy(-share, gp, grad_refs.row_mut(a));
                }
            } else {
                let c = t.negative_classes[k - 1];
                axpy(coef / members[&c].len() as f64, gp, class_grad.get_mut(&c).unwrap());
            }
        }
    }

    for (c, rows) in &members {
        for &r in rows {
            axpy(1.0, &class_grad[c], grad_refs.row_mut(r));
            axpy(1.0, &excl_grad[c], grad_refs.row_mut(r));
        }
    }

    let mut grads = ParamGrads { inv_temp: d_s * inv, ..ParamGrads::default() };
    let mut grad_x = grad_anchor;
    let mut bn_stats = None;
    match meta_fwd {
        Some(fwd) => {
            let (d_inputs, meta_grads) = params.meta.backward_batch(&fwd.cache, &grad_refs)?;
            grad_x.add_scaled(1.0, &d_inputs);
            grads.meta = Some(meta_grads);
            bn_stats = fwd.stats;
        }
        None => grad_x.add_scaled(1.0, &grad_refs),
    }
    Ok(Term { value: value * inv, grad_x, grads, bn_stats })
}
