//! Flat `key = value` run configuration with two presets.
//!
//! Lines starting with `#` and blank lines are ignored. A `preset` line is
//! applied first regardless of its position, then every other key
//! overrides the preset value. Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::losses::LossConfig;
use crate::model::ModelDims;
use crate::sampler::SamplingStrategy;
use crate::trainer::{LossKind, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {msg}")]
    InvalidValue { key: String, value: String, msg: String },
    #[error("unknown preset {0:?} (expected paper or desk)")]
    UnknownPreset(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters at full width.
    Paper,
    /// Narrow model for the synthetic benchmark.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(ConfigError::UnknownPreset(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Directory written by `prepare`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "preset",
    "data_dir",
    "out_dir",
    "d",
    "heads",
    "blocks",
    "max_len",
    "learning_rate",
    "epochs",
    "batch_size",
    "warmup_ratio",
    "dropout",
    "seed",
    "grad_clip",
    "loss",
    "lambda",
    "tau",
    "alpha_tail",
    "alpha_head",
    "dpo_beta",
    "reweight",
    "sampler",
    "k",
    "gumbel_scale",
];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = TrainConfig {
            learning_rate: 5e-4,
            epochs: 20,
            batch_size: 128,
            warmup_ratio: 0.1,
            dropout: 0.8,
            seed: 0,
            loss: LossKind::CeLpo,
            loss_config: LossConfig::default(),
            sampler: SamplingStrategy::default(),
            grad_clip: None,
        };
        let common = |d, heads, train| RunConfig {
            preset,
            data_dir: PathBuf::from("prepared"),
            out_dir: PathBuf::from("runs"),
            d,
            heads,
            blocks: 1,
            max_len: crate::data::MAX_SEQ_LEN,
            train,
        };
        match preset {
            Preset::Paper => common(768, 16, base),
            Preset::Desk => common(64, 4, TrainConfig { learning_rate: 1e-3, dropout: 0.2, ..base }),
        }
    }

    /// Parses config text. `preset_override` wins over any `preset` line.
    pub fn parse(text: &str, preset_override: Option<Preset>) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey { line: i + 1, key: k.to_string() });
            }
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::DuplicateKey { line: i + 1, key: k.to_string() });
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let preset = match preset_override {
            Some(p) => p,
            None => pairs.iter().find(|(k, _)| k == "preset").map_or(Ok(Preset::Desk), |(_, v)| v.parse())?,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
                msg: e.to_string(),
            })
        }
        let invalid = |msg: String| ConfigError::InvalidValue { key: key.to_string(), value: value.to_string(), msg };
        let t = &mut self.train;
        match key {
            "preset" => self.preset = value.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "warmup_ratio" => t.warmup_ratio = num(key, value)?,
            "dropout" => t.dropout = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(num(key, value)?) },
            "loss" => t.loss = value.parse().map_err(|e: crate::trainer::TrainError| invalid(e.to_string()))?,
            "lambda" => t.loss_config.lambda = num(key, value)?,
            "tau" => t.loss_config.tau = num(key, value)?,
            "alpha_tail" => t.loss_config.alpha_tail = num(key, value)?,
            "alpha_head" => t.loss_config.alpha_head = num(key, value)?,
            "dpo_beta" => t.loss_config.dpo_beta = num(key, value)?,
            "reweight" => t.loss_config.reweight = num(key, value)?,
            "sampler" => {
                t.sampler.kind = value.parse().map_err(|e: crate::sampler::SamplerError| invalid(e.to_string()))?
            }
            "k" => t.sampler.k = num(key, value)?,
            "gumbel_scale" => t.sampler.gumbel_scale = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_dims(1).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn model_dims(&self, num_items: usize) -> ModelDims {
        ModelDims { d: self.d, heads: self.heads, blocks: self.blocks, max_len: self.max_len, num_items }
    }

    /// Every key with its resolved value, in the order of [`KEYS`].
    /// Parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let l = &t.loss_config;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("preset", self.preset.name().into());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("d", self.d.to_string());
        put("heads", self.heads.to_string());
        put("blocks", self.blocks.to_string());
        put("max_len", self.max_len.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("warmup_ratio", t.warmup_ratio.to_string());
        put("dropout", t.dropout.to_string());
        put("seed", t.seed.to_string());
        put("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        put("loss", t.loss.to_string());
        put("lambda", l.lambda.to_string());
        put("tau", l.tau.to_string());
        put("alpha_tail", l.alpha_tail.to_string());
        put("alpha_head", l.alpha_head.to_string());
        put("dpo_beta", l.dpo_beta.to_string());
        put("reweight", l.reweight.to_string());
        put("sampler", t.sampler.kind.to_string());
        put("k", t.sampler.k.to_string());
        put("gumbel_scale", t.sampler.gumbel_scale.to_string());
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}
