//! Run configuration: a flat TOML file whose keys can be overridden from the
//! command line.

use std::path::{Path, PathBuf};

use gta_core::data_io::SyntheticSpec;
use gta_core::forecaster::{BranchConfig, ForecasterConfig};
use gta_core::encoder::EncoderConfig;
use gta_core::model::ModelConfig;
use gta_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Training CSV; defaults to `<out>/train.csv`.
    pub train: Option<PathBuf>,
    /// Test CSV; defaults to `<out>/test.csv`.
    pub test: Option<PathBuf>,
    /// Defaults to `<out>/model.gta`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<out>/scores.csv`.
    pub scores: Option<PathBuf>,
    /// Labeled series used by `eval` when the score file lacks labels.
    pub labels: Option<PathBuf>,
    /// Planted edge list for `graph-report`; defaults to `<out>/graph_true.txt`.
    pub planted: Option<PathBuf>,
    /// Synthetic spec TOML for `synth`; the built-in spec when absent.
    pub synthetic: Option<PathBuf>,
    /// Median-downsampling factor applied to input series.
    pub downsample: usize,

    pub window: usize,
    pub label_len: usize,
    pub levels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub max_len: usize,

    pub epochs: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub lr: f64,
    pub policy_lr: f64,
    pub lambda_s: f64,
    pub learn_graph: bool,

    /// Fixed detection threshold; the best-F1 threshold when absent.
    pub threshold: Option<f64>,

    pub bench_n: u64,
    pub bench_d: u64,
    pub bench_h: u64,
    pub bench_m: u64,
    pub bench_d1: u64,
    pub bench_d2: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = ForecasterConfig::new(1, 128, 8);
        let split = BranchConfig::three_way(128, 8);
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            train: None,
            test: None,
            checkpoint: None,
            scores: None,
            labels: None,
            planted: None,
            synthetic: None,
            downsample: 1,
            window: 60,
            label_len: f.label_len,
            levels: 3,
            d_model: f.d_model,
            heads: f.heads,
            enc_layers: f.enc_layers,
            dec_layers: f.dec_layers,
            ff_width: f.ff_width,
            dropout: f.dropout,
            max_len: f.max_len,
            epochs: t.epochs,
            patience: t.patience,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            stride: t.stride,
            val_fraction: t.val_fraction,
            lr: t.lr,
            policy_lr: t.policy_lr,
            lambda_s: t.lambda_s,
            learn_graph: t.learn_graph,
            threshold: None,
            bench_n: 60,
            bench_d: 128,
            bench_h: 8,
            bench_m: 64,
            bench_d1: split.d1 as u64,
            bench_d2: split.d2 as u64,
        }
    }
}

/// Parses `KEY=VALUE`; the value is read as a TOML literal, falling back to
/// a plain string so paths need no quoting.
pub fn parse_override(text: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {text:?} is not KEY=VALUE")))?;
    let key = key.trim().replace('-', "_");
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((key, value))
}

impl RunConfig {
    /// Reads `path` (if any), then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.downsample == 0 {
            return Err(CliError::Usage("downsample must be at least 1".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }

    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(name))
    }

    pub fn train_path(&self) -> PathBuf {
        self.or_out(&self.train, "train.csv")
    }

    pub fn test_path(&self) -> PathBuf {
        self.or_out(&self.test, "test.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.or_out(&self.checkpoint, "model.gta")
    }

    pub fn scores_path(&self) -> PathBuf {
        self.or_out(&self.scores, "scores.csv")
    }

    pub fn planted_path(&self) -> PathBuf {
        self.or_out(&self.planted, "graph_true.txt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }

    pub fn learned_graph_path(&self) -> PathBuf {
        self.out.join("graph_learned.txt")
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        match &self.synthetic {
            None => Ok(SyntheticSpec::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("synthetic spec {}: {e}", p.display())))?;
                Ok(SyntheticSpec::from_toml(&text)?)
            }
        }
    }

    /// Architecture for `num_nodes` sensors; the three branch widths follow
    /// from `d_model` and `heads`.
    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            window: self.window,
            encoder: EncoderConfig {
                levels: self.levels,
                ..EncoderConfig::for_model(self.d_model, self.levels)
            },
            forecaster: ForecasterConfig {
                num_nodes,
                d_model: self.d_model,
                heads: self.heads,
                enc_layers: self.enc_layers,
                dec_layers: self.dec_layers,
                ff_width: self.ff_width,
                dropout: self.dropout,
                max_len: self.max_len,
                label_len: self.label_len,
                branch: BranchConfig::three_way(self.d_model, self.heads),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            stride: self.stride,
            val_fraction: self.val_fraction,
            lr: self.lr,
            policy_lr: self.policy_lr,
            lambda_s: self.lambda_s,
            learn_graph: self.learn_graph,
        }
    }
}
