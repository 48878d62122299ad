//! Training configuration and its flat `key = value` text form.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{domain, Error, Result};
use crate::losses::DEFAULT_INV_TEMP;
use crate::meta::DEFAULT_REDUCTION;
use crate::objective::{LossConfig, TupleKind};
use crate::sampling::BatchSpec;

use super::data::SyntheticSpec;
use super::model::EncoderKind;
use super::optim::{AdamConfig, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    /// Retrieval among held-out identities.
    UnseenIds,
    /// Retrieval among training identities (the only option for the table
    /// encoder).
    SeenIds,
}

impl EvalProtocol {
    pub fn name(self) -> &'static str {
        match self {
            EvalProtocol::UnseenIds => "unseen_ids",
            EvalProtocol::SeenIds => "seen_ids",
        }
    }
}

impl FromStr for EvalProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unseen_ids" => Ok(EvalProtocol::UnseenIds),
            "seen_ids" => Ok(EvalProtocol::SeenIds),
            other => Err(Error::Parse(format!("unknown eval protocol `{other}`"))),
        }
    }
}

/// Epochs at which stage 2 (meta-learner, classifier and temperatures only)
/// and stage 3 (everything) begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub stage2: usize,
    pub stage3: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    /// Load samples from this file instead of generating them.
    pub data_file: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub hidden: usize,
    pub dim: usize,
    pub reduction: usize,
    pub loss: LossConfig,
    pub inv_temp: f64,
    pub cls_inv_temp: f64,
    pub learn_temperature: bool,
    pub batch: BatchSpec,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub stages: Option<Stages>,
    pub protocol: EvalProtocol,
    pub eval_every: usize,
    pub histogram_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticSpec::default(),
            data_file: None,
            encoder: EncoderKind::Mlp,
            hidden: 64,
            dim: 32,
            reduction: DEFAULT_REDUCTION,
            loss: LossConfig { tuple_kind: TupleKind::MpnTuple, n_classes: 8, ..LossConfig::default() },
            inv_temp: DEFAULT_INV_TEMP,
            cls_inv_temp: DEFAULT_INV_TEMP,
            learn_temperature: true,
            batch: BatchSpec { p: 8, k: 4 },
            adam: AdamConfig::default(),
            schedule: LrSchedule::default(),
            epochs: 60,
            stages: Some(Stages { stage2: 36, stage3: 48 }),
            protocol: EvalProtocol::UnseenIds,
            eval_every: 5,
            histogram_bins: 20,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn parse_named<T: FromStr<Err = Error>>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|e: Error| e.to_string())
}

fn opt_string<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl TrainConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let l = &self.loss;
        vec![
            ("seed", self.seed.to_string()),
            ("data_file", self.data_file.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("num_ids", self.data.num_ids.to_string()),
            ("test_ids", self.data.test_ids.to_string()),
            ("samples_per_id", self.data.samples_per_id.to_string()),
            ("raw_dim", self.data.raw_dim.to_string()),
            ("cluster_scale", self.data.cluster_scale.to_string()),
            ("noise_scale", self.data.noise_scale.to_string()),
            ("nuisance", opt_string(&self.data.nuisance)),
            ("data_seed", self.data.seed.to_string()),
            ("encoder", self.encoder.name().into()),
            ("hidden", self.hidden.to_string()),
            ("dim", self.dim.to_string()),
            ("reduction", self.reduction.to_string()),
            ("tuple_loss", l.tuple_kind.name().into()),
            ("cls_weight", l.cls_weight.to_string()),
            ("tuple_weight", l.tuple_weight.to_string()),
            ("n_classes", l.n_classes.to_string()),
            ("similarity", l.similarity.name().into()),
            ("mining", l.mining.name().into()),
            ("margin", l.margin.to_string()),
            ("samples", opt_string(&l.samples)),
            ("include_anchor", l.include_anchor_in_prototype.to_string()),
            ("inv_temp", self.inv_temp.to_string()),
            ("cls_inv_temp", self.cls_inv_temp.to_string()),
            ("learn_temperature", self.learn_temperature.to_string()),
            ("p", self.batch.p.to_string()),
            ("k", self.batch.k.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("lr_start", self.schedule.start.to_string()),
            ("lr_peak", self.schedule.peak.to_string()),
            ("warmup_epochs", self.schedule.warmup_epochs.to_string()),
            ("decay_factor", self.schedule.decay_factor.to_string()),
            ("decay_every", self.schedule.decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            (
                "stages",
                self.stages.map_or("none".into(), |s| format!("{},{}", s.stage2, s.stage3)),
            ),
            ("eval_protocol", self.protocol.name().into()),
            ("eval_every", self.eval_every.to_string()),
            ("histogram_bins", self.histogram_bins.to_string()),
        ]
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse(value)?,
            "data_file" => self.data_file = (value != "none").then(|| PathBuf::from(value)),
            "num_ids" => self.data.num_ids = parse(value)?,
            "test_ids" => self.data.test_ids = parse(value)?,
            "samples_per_id" => self.data.samples_per_id = parse(value)?,
            "raw_dim" => self.data.raw_dim = parse(value)?,
            "cluster_scale" => self.data.cluster_scale = parse(value)?,
            "noise_scale" => self.data.noise_scale = parse(value)?,
            "nuisance" => self.data.nuisance = if value == "none" { None } else { Some(parse(value)?) },
            "data_seed" => self.data.seed = parse(value)?,
            "encoder" => self.encoder = parse_named(value)?,
            "hidden" => self.hidden = parse(value)?,
            "dim" => self.dim = parse(value)?,
            "reduction" => self.reduction = parse(value)?,
            "tuple_loss" => l.tuple_kind = parse_named(value)?,
            "cls_weight" => l.cls_weight = parse(value)?,
            "tuple_weight" => l.tuple_weight = parse(value)?,
            "n_classes" => l.n_classes = parse(value)?,
            "similarity" => l.similarity = parse_named(value)?,
            "mining" => l.mining = parse_named(value)?,
            "margin" => l.margin = parse(value)?,
            "samples" => l.samples = if value == "auto" || value == "none" { None } else { Some(parse(value)?) },
            "include_anchor" => l.include_anchor_in_prototype = parse_bool(value)?,
            "inv_temp" => self.inv_temp = parse(value)?,
            "cls_inv_temp" => self.cls_inv_temp = parse(value)?,
            "learn_temperature" => self.learn_temperature = parse_bool(value)?,
            "p" => self.batch.p = parse(value)?,
            "k" => self.batch.k = parse(value)?,
            "beta1" => self.adam.beta1 = parse(value)?,
            "beta2" => self.adam.beta2 = parse(value)?,
            "adam_eps" => self.adam.eps = parse(value)?,
            "weight_decay" => self.adam.weight_decay = parse(value)?,
            "lr_start" => self.schedule.start = parse(value)?,
            "lr_peak" => self.schedule.peak = parse(value)?,
            "warmup_epochs" => self.schedule.warmup_epochs = parse(value)?,
            "decay_factor" => self.schedule.decay_factor = parse(value)?,
            "decay_every" => self.schedule.decay_every = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "stages" => {
                self.stages = if value == "none" {
                    None
                } else {
                    let (a, b) = value.split_once(',').ok_or("expected `none` or `stage2,stage3`")?;
                    Some(Stages { stage2: parse(a.trim())?, stage3: parse(b.trim())? })
                }
            }
            "eval_protocol" => self.protocol = parse_named(value)?,
            "eval_every" => self.eval_every = parse(value)?,
            "histogram_bins" => self.histogram_bins = parse(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are rejected.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: line.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |msg: String| Error::Config { line: i + 1, key: key.to_string(), msg };
            if !seen.insert(key.to_string()) {
                return Err(err("repeated key".into()));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_file.is_none() {
            self.data.validate()?;
        }
        self.loss.validate()?;
        self.batch.validate(self.loss.tuple_active())?;
        self.schedule.validate()?;
        if self.dim == 0 || self.hidden == 0 {
            return Err(domain("dim and hidden must be positive"));
        }
        if self.reduction == 0 || self.dim % self.reduction != 0 {
            return Err(domain(format!("reduction {} must divide dim {}", self.reduction, self.dim)));
        }
        if !(self.inv_temp > 0.0 && self.cls_inv_temp > 0.0) {
            return Err(domain("inverse temperatures must be positive"));
        }
        if let Some(s) = self.stages {
            if s.stage2 > s.stage3 || s.stage3 > self.epochs {
                return Err(domain(format!(
                    "stage boundaries {},{} must be nondecreasing and at most {} epochs",
                    s.stage2, s.stage3, self.epochs
                )));
            }
        }
        if self.encoder == EncoderKind::Table && self.protocol == EvalProtocol::UnseenIds {
            return Err(domain("the table encoder cannot embed unseen identities; use eval_protocol = seen_ids"));
        }
        if self.eval_every == 0 || self.histogram_bins == 0 {
            return Err(domain("eval_every and histogram_bins must be positive"));
        }
        if self.loss.n_classes > self.batch.p && self.loss.tuple_active() {
            return Err(domain(format!("n_classes {} exceeds P = {}", self.loss.n_classes, self.batch.p)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::SimilarityKind;
    use crate::objective::Mining;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.loss.similarity, SimilarityKind::Cosine);
        assert_eq!(cfg.loss.mining, Mining::All);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = TrainConfig::parse_text(
            "# run\nseed = 7\n\ntuple_loss = ntuple   # comment\nn_classes = 3\nstages = none\nnuisance = none\nsamples = 100\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.loss.tuple_kind, TupleKind::NTuple);
        assert_eq!(cfg.loss.n_classes, 3);
        assert_eq!(cfg.stages, None);
        assert_eq!(cfg.data.nuisance, None);
        assert_eq!(cfg.loss.samples, Some(100));
        assert_eq!(TrainConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = TrainConfig::parse_text("seed = 1\nlearning_rate = 3\n").unwrap_err();
        match err {
            Error::Config { line, key, .. } => assert_eq!((line, key.as_str()), (2, "learning_rate")),
            other => panic!("unexpected {other}"),
        }
        assert!(err_key(&TrainConfig::parse_text("seed = x\n")).contains("seed"));
        assert!(err_key(&TrainConfig::parse_text("seed = 1\nseed = 2\n")).contains("seed"));
        assert!(matches!(TrainConfig::parse_text("just words\n"), Err(Error::Config { line: 1, .. })));
    }

    fn err_key(r: &Result<TrainConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key.clone(),
            _ => String::new(),
        }
    }

    #[test]
    fn invalid_combinations() {
        for text in [
            "stages = 50,40\n",
            "stages = 10,70\n",
            "encoder = table\n",
            "reduction = 5\n",
            "tuple_loss = soft_triplet\n",
            "n_classes = 9\n",
        ] {
            assert!(matches!(TrainConfig::parse_text(text), Err(Error::Domain(_))), "{text}");
        }
    }
}
