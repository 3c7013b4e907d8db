//! Resolved run configuration: defaults, JSON config file, CLI overrides.
//!
//! Precedence is CLI flag > config file > built-in default; the resolved
//! struct is what gets persisted into run artifacts.

use crate::data::{DatasetName, NormalizeScheme};
use crate::error::{Error, Result};
use crate::geometry::{LossConfig, LossMode};
use crate::model::Preset;
use crate::schedule::ScheduleConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DATA_DIR_ENV: &str = "ARCLOSS_DATA_DIR";

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub data_dir: PathBuf,
    /// Architecture preset; derived from the dataset when absent.
    pub preset: Option<Preset>,
    pub loss: LossMode,
    pub lambda: f64,
    /// Angular margin (radians).
    pub margin_g: f64,
    /// Euclidean margin.
    pub margin_e: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Maximum learning rate (the ramps scale it).
    pub lr: f64,
    pub seed: u64,
    pub embed_dim: usize,
    /// Ramp-up length in epochs.
    pub rampup: usize,
    /// Ramp-down length in epochs.
    pub rampdown: usize,
    /// Apply the ramp-down to the auxiliary weight as well as lr/beta1.
    pub rampdown_weight: bool,
    /// Pixel preprocessing; derived from the dataset when absent.
    pub preprocess: Option<NormalizeScheme>,
    /// Optional deterministic subset sizes (first n examples) for desk-scale runs.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetName::Mnist,
            data_dir: default_data_dir(),
            preset: None,
            loss: LossMode::Amc,
            lambda: 0.1,
            margin_g: 0.5,
            margin_e: 1.0,
            epochs: 300,
            batch_size: 128,
            lr: 0.003,
            seed: 1,
            embed_dim: 128,
            rampup: 80,
            rampdown: 50,
            rampdown_weight: true,
            preprocess: None,
            train_subset: None,
            test_subset: None,
            out: PathBuf::from("runs/run"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn resolved_preset(&self) -> Preset {
        self.preset.unwrap_or(match self.dataset {
            DatasetName::Mnist => Preset::MnistNet,
            DatasetName::Cifar10 | DatasetName::Cifar100 => Preset::CifarNet,
        })
    }

    pub fn resolved_preprocess(&self) -> NormalizeScheme {
        self.preprocess.unwrap_or(match self.dataset {
            DatasetName::Mnist => NormalizeScheme::UnitRange,
            DatasetName::Cifar10 | DatasetName::Cifar100 => NormalizeScheme::Standardize,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.loss,
            lambda: self.lambda,
            margin_g: self.margin_g,
            margin_e: self.margin_e,
        }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_epochs: self.epochs,
            rampup_len: self.rampup,
            rampdown_len: self.rampdown,
            max_lr: self.lr,
            rampdown_weight: self.rampdown_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.schedule_config().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size: must be >= 2, got {}", self.batch_size)));
        }
        if !matches!(self.embed_dim, 2 | 3 | 128) {
            return Err(Error::Config(format!(
                "embed_dim: must be one of 2, 3, 128; got {}",
                self.embed_dim
            )));
        }
        if let Some(n) = self.train_subset {
            if n < self.batch_size {
                return Err(Error::Config(format!(
                    "train_subset: {n} is smaller than one batch ({})",
                    self.batch_size
                )));
            }
        }
        if self.test_subset == Some(0) {
            return Err(Error::Config("test_subset: must be >= 1".into()));
        }
        let preset = self.resolved_preset();
        let preset_input = match preset {
            Preset::MnistNet => (1, 28, 28),
            Preset::CifarNet => (3, 32, 32),
        };
        let data_input = match self.dataset {
            DatasetName::Mnist => (1, 28, 28),
            DatasetName::Cifar10 | DatasetName::Cifar100 => (3, 32, 32),
        };
        if preset_input != data_input {
            return Err(Error::Config(format!(
                "preset: {preset} expects input {preset_input:?} but dataset {} provides {data_input:?}",
                self.dataset
            )));
        }
        Ok(())
    }
}
