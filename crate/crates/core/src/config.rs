//! Training configuration, read from JSON. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::{NetConfig, SPATIAL_MULTIPLE};
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
    pub patch: usize,
    pub batch: usize,
    pub seed: u64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub net: NetConfig,
    pub data: DataSource,
    /// Random horizontal flips of training crops.
    pub flip: bool,
    /// Checkpoint period in steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: usize,
    /// Evaluate metrics on the luma channel instead of RGB.
    pub y_channel: bool,
    /// Directory for the CSV log and checkpoints.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            lr_final: 1e-7,
            total_steps: 2000,
            patch: 32,
            batch: 4,
            seed: 0,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: AdamWConfig::default().weight_decay,
            loss: LossWeights::default(),
            net: NetConfig::default(),
            data: DataSource::default(),
            flip: false,
            checkpoint_every: 0,
            y_channel: false,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(Error::Config(format!(
                "need lr_init > lr_final > 0, got {} and {}",
                self.lr_init, self.lr_final
            )));
        }
        if self.patch == 0 || self.patch % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of {SPATIAL_MULTIPLE}",
                self.patch
            )));
        }
        if self.total_steps == 0 || self.batch == 0 {
            return Err(Error::Config("total_steps and batch must be positive".into()));
        }
        self.optimizer().validate()?;
        self.loss.validate()?;
        self.net.validate()
    }
}
