//! The training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::EmbeddingBatch;
use crate::error::{domain, Error, Result};
use crate::losses::{ClassifierWeights, InverseTemperature};
use crate::math::Matrix;
use crate::meta::MetaLearnerParams;
use crate::objective::{combined_batch_loss, LossConfig, LossParams, TupleKind};
use crate::sampling::epoch_batches;

use super::config::{EvalProtocol, TrainConfig};
use super::data::Dataset;
use super::eval::{evaluate_retrieval, positive_pair_histogram, EvalResult, PairHistogram};
use super::model::{Encoder, EncoderKind, Model};
use super::optim::AdamState;

/// Smallest inverse temperature a learned temperature may reach.
pub const MIN_INV_TEMP: f64 = 1e-3;

/// Parameter groups a stage may train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageMask {
    pub encoder: bool,
    pub classifier: bool,
    pub meta: bool,
    pub temperature: bool,
}

impl StageMask {
    pub const ALL: StageMask = StageMask { encoder: true, classifier: true, meta: true, temperature: true };
}

/// Stage number (1-based), mask and loss for `epoch`.
pub fn stage_for(config: &TrainConfig, epoch: usize) -> (usize, StageMask, LossConfig) {
    let Some(stages) = config.stages else {
        return (1, StageMask::ALL, config.loss.clone());
    };
    if epoch < stages.stage2 {
        let mut loss = config.loss.clone();
        // prototypes come from raw features until the meta-learner trains
        if loss.tuple_kind == TupleKind::MpnTuple {
            loss.tuple_kind = TupleKind::PnTuple;
        }
        (1, StageMask { meta: false, ..StageMask::ALL }, loss)
    } else if epoch < stages.stage3 {
        (2, StageMask { encoder: false, ..StageMask::ALL }, config.loss.clone())
    } else {
        (3, StageMask::ALL, config.loss.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub tuple_loss: f64,
    pub inv_temp: f64,
    pub cls_inv_temp: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,stage,lr,loss,cls_loss,tuple_loss,inv_temp,cls_inv_temp,rank1,mAP";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            self.lr,
            self.loss,
            self.cls_loss,
            self.tuple_loss,
            self.inv_temp,
            self.cls_inv_temp,
            opt(self.rank1),
            opt(self.map)
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub final_eval: EvalResult,
    /// Positive-pair histograms on the training split, tagged `stage2` (end of
    /// stage 2, when stages are on) and `final`.
    pub histograms: Vec<(String, PairHistogram)>,
}

/// Fresh parameters for `config` on `dataset`.
pub fn init_model(config: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = match config.encoder {
        EncoderKind::Mlp => Encoder::mlp(dataset.raw_dim(), config.hidden, config.dim, &mut rng)?,
        EncoderKind::Table => Encoder::table(dataset.len(), config.dim, &mut rng)?,
    };
    let classes = dataset.train_ids();
    let scale = 1.0 / (config.dim as f64).sqrt();
    let classifier = ClassifierWeights::new(Matrix::from_fn(config.dim, classes, |_, _| {
        rand::Rng::gen_range(&mut rng, -scale..scale)
    }))?;
    let meta = MetaLearnerParams::init(config.dim, config.reduction, &mut rng)?;
    Ok(Model { encoder, classifier, meta, inv_temp: config.inv_temp, cls_inv_temp: config.cls_inv_temp })
}

/// Embeds `indices` of the dataset.
pub fn embed(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<Matrix> {
    model.encoder.embed(&dataset.rows(indices), indices)
}

/// Retrieval on the split named by `protocol`, from encoder outputs only.
pub fn evaluate(model: &Model, dataset: &Dataset, protocol: EvalProtocol) -> Result<EvalResult> {
    let pool = match protocol {
        EvalProtocol::UnseenIds => dataset.test_indices(),
        EvalProtocol::SeenIds => dataset.train_indices(),
    };
    if pool.is_empty() {
        return Err(domain(format!("no samples for the {} protocol", protocol.name())));
    }
    let split = dataset.query_gallery(&pool)?;
    let q = embed(model, dataset, &split.query)?;
    let g = embed(model, dataset, &split.gallery)?;
    let ql: Vec<usize> = split.query.iter().map(|&i| dataset.labels[i]).collect();
    let gl: Vec<usize> = split.gallery.iter().map(|&i| dataset.labels[i]).collect();
    evaluate_retrieval(&q, &ql, &g, &gl)
}

/// Positive-pair histogram of the training split.
pub fn train_histogram(model: &Model, dataset: &Dataset, bins: usize) -> Result<PairHistogram> {
    let idx = dataset.train_indices();
    let feats = embed(model, dataset, &idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
    positive_pair_histogram(&feats, &labels, &model.meta, bins)
}

struct Optimizers {
    encoder: AdamState,
    classifier: AdamState,
    meta: AdamState,
    inv_temp: AdamState,
    cls_inv_temp: AdamState,
}

/// Trains from the initialization drawn with `config.seed`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let model = init_model(config, dataset, config.seed)?;
    train_from(config, dataset, model)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_from(config: &TrainConfig, dataset: &Dataset, mut model: Model) -> Result<TrainOutcome> {
    config.validate()?;
    if model.classifier.num_classes() != dataset.train_ids() {
        return Err(domain("classifier width does not match the training identities"));
    }
    let train_idx = dataset.train_indices();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| dataset.labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = Optimizers {
        encoder: AdamState::new(model.encoder.flatten().len()),
        classifier: AdamState::new(model.classifier.weights.as_slice().len()),
        meta: AdamState::new(model.meta.trainable_len()),
        inv_temp: AdamState::new(1),
        cls_inv_temp: AdamState::new(1),
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut histograms = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let (stage, mask, loss_cfg) = stage_for(config, epoch);
        let lr = config.schedule.lr(epoch);
        let batches = epoch_batches(&train_labels, config.batch, &mut rng)?;
        let (mut sum, mut sum_cls, mut sum_tuple) = (0.0, 0.0, 0.0);
        for rows in &batches {
            let samples: Vec<usize> = rows.iter().map(|&r| train_idx[r]).collect();
            let labels: Vec<usize> = rows.iter().map(|&r| train_labels[r]).collect();
            let losses = train_step(config, dataset, &mut model, &mut opt, &loss_cfg, mask, lr, &samples, labels, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {}, step {step}: {msg}", epoch + 1)),
                    other => other,
                })?;
            sum += losses.0;
            sum_cls += losses.1;
            sum_tuple += losses.2;
            step += 1;
        }
        let nb = batches.len() as f64;
        let last = epoch + 1 == config.epochs;
        let (rank1, map) = if (epoch + 1) % config.eval_every == 0 || last {
            let r = evaluate(&model, dataset, config.protocol)?;
            (Some(r.rank1), Some(r.map))
        } else {
            (None, None)
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            stage,
            lr,
            loss: sum / nb,
            cls_loss: sum_cls / nb,
            tuple_loss: sum_tuple / nb,
            inv_temp: model.inv_temp,
            cls_inv_temp: model.cls_inv_temp,
            rank1,
            map,
        });
        if let Some(stages) = config.stages {
            if epoch + 1 == stages.stage3 && stages.stage3 > stages.stage2 {
                histograms.push(("stage2".to_string(), train_histogram(&model, dataset, config.histogram_bins)?));
            }
        }
    }
    histograms.push(("final".to_string(), train_histogram(&model, dataset, config.histogram_bins)?));
    let final_eval = evaluate(&model, dataset, config.protocol)?;
    Ok(TrainOutcome { model, history, final_eval, histograms })
}

/// One optimizer step; returns the weighted, classification and tuple losses.
#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &TrainConfig,
    dataset: &Dataset,
    model: &mut Model,
    opt: &mut Optimizers,
    loss_cfg: &LossConfig,
    mask: StageMask,
    lr: f64,
    samples: &[usize],
    labels: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let (feats, cache) = model.encoder.forward(&dataset.rows(samples), samples)?;
    let batch = EmbeddingBatch::with_provenance(feats, labels, samples.to_vec())?;
    let params = LossParams {
        classifier: &model.classifier,
        meta: &model.meta,
        cls_temp: InverseTemperature::new(model.cls_inv_temp, config.learn_temperature)?,
        tuple_temp: InverseTemperature::new(model.inv_temp, config.learn_temperature)?,
    };
    let out = combined_batch_loss(&batch, &params, loss_cfg, rng)?;
    let grads = &out.result.grad_params;
    if !out.result.grad_inputs.values().flatten().all(|g| g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite feature gradient (classification {}, tuple {})",
            out.cls_value, out.tuple_value
        )));
    }
    let active = loss_cfg.cls_active() || (loss_cfg.tuple_active() && out.tuple_count > 0);
    let cfg = &config.adam;

    if mask.encoder && active {
        let mut d_feats = Matrix::zeros(batch.len(), batch.dim());
        for (row, g) in &out.result.grad_inputs {
            d_feats.row_mut(*row).copy_from_slice(g);
        }
        let g = model.encoder.backward(&cache, &d_feats)?;
        let mut p = model.encoder.flatten();
        opt.encoder.step(cfg, lr, &mut p, &g, true)?;
        model.encoder.assign(&p)?;
    }
    if let (true, Some(g)) = (mask.classifier, &grads.classifier) {
        opt.classifier.step(cfg, lr, model.classifier.weights.as_mut_slice(), g.as_slice(), true)?;
    }
    if let (true, Some(g)) = (mask.meta, &grads.meta) {
        let mut p = model.meta.flatten_trainable();
        opt.meta.step(cfg, lr, &mut p, &g.flatten(), true)?;
        model.meta.assign_trainable(&p)?;
    }
    if let Some(stats) = &out.bn_stats {
        model.meta.update_running_stats(stats);
    }
    if mask.temperature && config.learn_temperature {
        if loss_cfg.tuple_active() && out.tuple_count > 0 {
            let mut s = [model.inv_temp];
            opt.inv_temp.step(cfg, lr, &mut s, &[grads.inv_temp], false)?;
            model.inv_temp = s[0].max(MIN_INV_TEMP);
        }
        if loss_cfg.cls_active() {
            let mut s = [model.cls_inv_temp];
            opt.cls_inv_temp.step(cfg, lr, &mut s, &[grads.cls_inv_temp], false)?;
            model.cls_inv_temp = s[0].max(MIN_INV_TEMP);
        }
    }
    Ok((out.result.value, out.cls_value, out.tuple_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{generate_synthetic, SyntheticSpec};
    use crate::harness::config::Stages;

    fn small_config() -> TrainConfig {
        TrainConfig {
            data: SyntheticSpec { num_ids: 12, test_ids: 4, samples_per_id: 4, raw_dim: 8, ..SyntheticSpec::default() },
            hidden: 16,
            dim: 8,
            reduction: 4,
            batch: crate::sampling::BatchSpec { p: 4, k: 2 },
            loss: LossConfig { tuple_kind: TupleKind::MpnTuple, n_classes: 4, ..LossConfig::default() },
            epochs: 6,
            stages: Some(Stages { stage2: 2, stage3: 4 }),
            schedule: super::super::optim::LrSchedule { warmup_epochs: 1, ..Default::default() },
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let cfg = TrainConfig { epochs: 0, stages: None, ..small_config() };
        let ds = generate_synthetic(&cfg.data).unwrap();
        let out = train(&cfg, &ds).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model, init_model(&cfg, &ds, cfg.seed).unwrap());
    }

    #[test]
    fn zero_weights_leave_the_encoder_alone() {
        let mut cfg = TrainConfig { stages: None, ..small_config() };
        cfg.loss.cls_weight = 0.0;
        cfg.loss.tuple_weight = 0.0;
        let ds = generate_synthetic(&cfg.data).unwrap();
        let out = train(&cfg, &ds).unwrap();
        let init = init_model(&cfg, &ds, cfg.seed).unwrap();
        assert_eq!(out.model.encoder, init.encoder);
        assert_eq!(out.history.len(), 6);
    }

    #[test]
    fn stage_two_freezes_the_encoder() {
        let cfg = small_config();
        let ds = generate_synthetic(&cfg.data).unwrap();
        let before = train(&TrainConfig { epochs: 2, stages: Some(Stages { stage2: 2, stage3: 2 }), ..cfg.clone() }, &ds)
            .unwrap()
            .model;
        let after = train_from(
            &TrainConfig { epochs: 1, stages: Some(Stages { stage2: 0, stage3: 1 }), ..cfg.clone() },
            &ds,
            before.clone(),
        )
        .unwrap()
        .model;
        assert_eq!(after.encoder, before.encoder);
        assert_ne!(after.meta, before.meta);
        assert_ne!(after.classifier, before.classifier);
    }

    #[test]
    fn stage_one_uses_raw_prototypes() {
        let cfg = small_config();
        assert_eq!(stage_for(&cfg, 0).2.tuple_kind, TupleKind::PnTuple);
        assert!(!stage_for(&cfg, 1).1.meta);
        assert_eq!(stage_for(&cfg, 2).0, 2);
        assert_eq!(stage_for(&cfg, 2).2.tuple_kind, TupleKind::MpnTuple);
        assert_eq!(stage_for(&cfg, 5).1, StageMask::ALL);
    }

    #[test]
    fn runs_are_deterministic_and_record_histograms() {
        let cfg = small_config();
        let ds = generate_synthetic(&cfg.data).unwrap();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let tags: Vec<&str> = a.histograms.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tags, ["stage2", "final"]);
        assert!(a.history[1].map.is_some() && a.history[0].map.is_none());
    }

    #[test]
    fn training_lowers_the_loss() {
        let mut cfg = TrainConfig {
            epochs: 30,
            stages: None,
            data: SyntheticSpec { num_ids: 16, test_ids: 4, samples_per_id: 6, raw_dim: 8, cluster_scale: 2.0, ..SyntheticSpec::default() },
            ..small_config()
        };
        cfg.loss = LossConfig { tuple_kind: TupleKind::SoftTriplet, n_classes: 2, ..LossConfig::default() };
        let ds = generate_synthetic(&cfg.data).unwrap();
        let out = train(&cfg, &ds).unwrap();
        assert!(out.history.last().unwrap().loss < out.history[0].loss);
    }
}
