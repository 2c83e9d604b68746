//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so command
//! line overrides are applied by calling [`RunConfig::set`] after loading a file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{GcrError, Result};
use crate::graph::{InteractionFormat, SplitSpec};
use crate::tensor::HeadConfig;
use crate::training::{EvalMetric, ModelKind, ModelSpec, Objective, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub data: PathBuf,
    pub cache: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub per_user: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub format: String,
    pub split: [f64; 3],
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub lr_grid: bool,
    pub k: usize,
    pub base_auc: Option<f64>,
    pub base_name: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths {
                input: None,
                data: PathBuf::from("data"),
                cache: PathBuf::from("pgr.cache"),
                checkpoint: PathBuf::from("model.ckpt"),
                history: None,
                report: None,
                per_user: None,
            },
            format: "implicit".into(),
            split: [0.65, 0.15, 0.20],
            model: ModelSpec::new(ModelKind::Ecc),
            train: TrainConfig::default(),
            lr_grid: false,
            k: 20,
            base_auc: None,
            base_name: "base".into(),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GcrError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(GcrError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GcrError::MissingArtifact {
                path: path.display().to_string(),
                hint: "config file not found".into(),
            });
        }
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GcrError::Parse {
                line: n + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| GcrError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| GcrError::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "paths.input" => self.paths.input = optional_path(value),
            "paths.data" => self.paths.data = value.into(),
            "paths.cache" => self.paths.cache = value.into(),
            "paths.checkpoint" => self.paths.checkpoint = value.into(),
            "paths.history" => self.paths.history = optional_path(value),
            "paths.report" => self.paths.report = optional_path(value),
            "paths.per_user" => self.paths.per_user = optional_path(value),
            "data.format" => {
                value.parse::<InteractionFormat>()?;
                self.format = value.into();
            }
            "split.ratios" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                let ratios: [f64; 3] = parts
                    .try_into()
                    .map_err(|_| GcrError::Config("split.ratios needs three values".into()))?;
                SplitSpec::new(ratios, 0)?;
                self.split = ratios;
            }
            "model.mode" => m.kind = value.parse()?,
            "model.L" => m.depth = parse(key, value)?,
            "model.d" => m.dim = parse(key, value)?,
            "model.H_n" => m.head.hidden_units = parse(key, value)?,
            "model.H_l" => m.head.hidden_layers = parse(key, value)?,
            "model.leaky_slope" => m.head.leaky_slope = parse(key, value)?,
            "model.dropout" | "train.dropout" => {
                m.head.dropout = parse(key, value)?;
                t.dropout = m.head.dropout;
            }
            "model.bn_momentum" => m.head.bn_momentum = parse(key, value)?,
            "model.init_std" => m.init_std = parse(key, value)?,
            "model.train_layer_weights" => m.train_layer_weights = parse_bool(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.lr_grid" => self.lr_grid = parse_bool(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.l2" => t.l2 = parse(key, value)?,
            "train.epochs_max" => t.epochs_max = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.negatives_per_positive" => t.negatives_per_positive = parse(key, value)?,
            "train.objective" => t.objective = value.parse::<Objective>()?,
            "train.eval_metric" => t.eval_metric = value.parse::<EvalMetric>()?,
            "train.hop_cap" => {
                t.hop_cap = match value {
                    "" | "none" | "0" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "eval.k" => self.k = parse(key, value)?,
            "eval.base_auc" => self.base_auc = Some(parse(key, value)?),
            "eval.base_name" => self.base_name = value.into(),
            _ => return Err(GcrError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn format(&self) -> Result<InteractionFormat> {
        self.format.parse()
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.split, self.seed)
    }

    /// Training settings with the run seed and eval cutoff folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            eval_k: self.k,
            dropout: self.model.head.dropout,
            ..self.train
        }
    }

    pub fn head_template(&self) -> HeadConfig {
        self.model.head
    }

    pub fn history_path(&self) -> PathBuf {
        self.paths.history.clone().unwrap_or_else(|| {
            let mut p = self.paths.checkpoint.clone().into_os_string();
            p.push(".history.jsonl");
            PathBuf::from(p)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.split_spec()?;
        if self.k == 0 {
            return Err(GcrError::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.model.dim, 64);
        assert_eq!(c.model.kind, ModelKind::Ecc);
        assert_eq!(c.model.head.hidden_units, 256);
        assert_eq!(c.model.head.hidden_layers, 1);
        assert_eq!(c.model.head.dropout, 0.7);
        assert_eq!(c.model.head.leaky_slope, 0.02);
        assert_eq!(c.model.head.bn_momentum, 0.1);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.train.l2, 1e-5);
        assert_eq!(c.k, 20);
        assert_eq!(c.split, [0.65, 0.15, 0.20]);
        c.validate().unwrap();
    }

    #[test]
    fn text_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nmodel.L=3\n\nmodel.mode = hcc\ntrain.lr=0.005\nsplit.ratios=0.8,0.1,0.1\n").unwrap();
        assert_eq!(c.model.depth, 3);
        assert_eq!(c.model.kind, ModelKind::Hcc);
        assert_eq!(c.train.lr, 0.005);
        c.set_pair("model.L=1").unwrap();
        assert_eq!(c.model.depth, 1);
        assert_eq!(c.split, [0.8, 0.1, 0.1]);
        assert!(c.echo()["model"]["depth"] == 1);
    }

    #[test]
    fn bad_lines_are_reported_with_numbers() {
        let mut c = RunConfig::default();
        match c.apply_text("model.L=2\nnot a pair\n") {
            Err(GcrError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(c.set("model.nope", "1").is_err());
        assert!(c.set("model.L", "x").is_err());
        assert!(c.set("split.ratios", "0.5,0.2").is_err());
        assert!(c.set("model.mode", "gat").is_err());
    }
}
