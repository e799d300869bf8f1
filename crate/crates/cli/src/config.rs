//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys are
//! errors. Serializing a parsed config and parsing it again gives the same
//! config.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use segbert::model::ResidualMode;
use segbert::training::PretrainTask;
use segbert::unify::Strategy;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub strategy: Strategy,
    /// `None` resolves to the strategy default.
    pub k: Option<usize>,
    pub residual: ResidualMode,
    pub epochs: usize,
    /// `None` resolves to the per-dataset default.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain: Vec<PretrainTask>,
    pub pretrain_epochs: usize,
    pub clip_norm: Option<f64>,
    pub refit: bool,
    pub wl_iterations: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub dropout_hidden: f64,
    pub dropout_attn: f64,
    pub init_std: f64,
    pub jobs: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = segbert::training::TrainConfig::default();
        let m = segbert::model::ModelConfig::default();
        RunConfig {
            dataset: "MUTAG".into(),
            data_dir: None,
            strategy: Strategy::PaddingPruning,
            k: None,
            residual: ResidualMode::None,
            epochs: t.epochs,
            learning_rate: None,
            weight_decay: t.weight_decay,
            patience: t.patience,
            batch_size: t.batch_size,
            seed: t.seed,
            pretrain: Vec::new(),
            pretrain_epochs: t.pretrain_epochs,
            clip_norm: t.clip_norm,
            refit: t.refit,
            wl_iterations: t.wl_iterations,
            hidden: m.hidden,
            heads: m.heads,
            layers: m.layers,
            intermediate: m.intermediate,
            dropout_hidden: m.dropout_hidden,
            dropout_attn: m.dropout_attn,
            init_std: m.init_std,
            jobs: 1,
            out: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: ToString,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Comma-separated task list; empty means no pre-training.
pub fn parse_tasks(value: &str) -> Result<Vec<PretrainTask>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(str::parse)
        .collect()
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let tasks: Vec<String> = self.pretrain.iter().map(ToString::to_string).collect();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "auto".into(), |p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.clone()),
            ("data_dir", path(&self.data_dir)),
            ("strategy", self.strategy.to_string()),
            ("k", opt(&self.k)),
            ("residual", self.residual.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.map_or_else(|| "auto".into(), float)),
            ("weight_decay", float(self.weight_decay)),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("pretrain", if tasks.is_empty() { "none".into() } else { tasks.join(",") }),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("clip_norm", self.clip_norm.map_or_else(|| "none".into(), float)),
            ("refit", self.refit.to_string()),
            ("wl_iterations", self.wl_iterations.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("intermediate", self.intermediate.to_string()),
            ("dropout_hidden", float(self.dropout_hidden)),
            ("dropout_attn", float(self.dropout_attn)),
            ("init_std", float(self.init_std)),
            ("jobs", self.jobs.to_string()),
            ("out", self.out.display().to_string()),
            ("checkpoint", path(&self.checkpoint)),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let path = |v: &str| (v != "auto").then(|| PathBuf::from(v));
            match key {
                "dataset" => self.dataset = value.to_string(),
                "data_dir" => self.data_dir = path(value),
                "strategy" => self.strategy = parse(key, value)?,
                "k" => self.k = parse_opt(key, value)?,
                "residual" => self.residual = parse(key, value)?,
                "epochs" => self.epochs = parse(key, value)?,
                "learning_rate" => self.learning_rate = parse_opt(key, value)?,
                "weight_decay" => self.weight_decay = parse(key, value)?,
                "patience" => self.patience = parse(key, value)?,
                "batch_size" => self.batch_size = parse(key, value)?,
                "seed" => self.seed = parse(key, value)?,
                "pretrain" => {
                    self.pretrain = parse_tasks(value).map_err(|message| ConfigError::Value {
                        key: key.into(),
                        message,
                    })?
                }
                "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
                "clip_norm" => self.clip_norm = parse_opt(key, value)?,
                "refit" => self.refit = parse(key, value)?,
                "wl_iterations" => self.wl_iterations = parse(key, value)?,
                "hidden" => self.hidden = parse(key, value)?,
                "heads" => self.heads = parse(key, value)?,
                "layers" => self.layers = parse(key, value)?,
                "intermediate" => self.intermediate = parse(key, value)?,
                "dropout_hidden" => self.dropout_hidden = parse(key, value)?,
                "dropout_attn" => self.dropout_attn = parse(key, value)?,
                "init_std" => self.init_std = parse(key, value)?,
                "jobs" => self.jobs = parse(key, value)?,
                "out" => self.out = PathBuf::from(value),
                "checkpoint" => self.checkpoint = path(value),
                other => {
                    return Err(ConfigError::UnknownKey {
                        line: n + 1,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }
}
