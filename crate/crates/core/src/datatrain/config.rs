use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datatrain::model::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Training configuration; the JSON keys are the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_c2f_repvitcamf: bool,
    pub use_mscaf: bool,
    pub use_kan_bottleneck: bool,
    pub freeze_backbone: bool,
    pub num_classes: usize,
    pub lr_schedule: LrSchedule,
    /// Stop once train-split mAP50 reaches this value.
    pub target_map50: Option<f64>,
    /// Epochs between train-split evaluations; 0 disables them.
    pub eval_every: usize,
    /// Extra parameter prefixes held fixed during training.
    pub freeze_prefixes: Vec<String>,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            lr: 0.001,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0001,
            seed: 0,
            width_mult: 0.25,
            depth_mult: 0.33,
            use_c2f_repvitcamf: true,
            use_mscaf: true,
            use_kan_bottleneck: true,
            freeze_backbone: false,
            num_classes: 1,
            lr_schedule: LrSchedule::Constant,
            target_map50: None,
            eval_every: 0,
            freeze_prefixes: Vec::new(),
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(self.width_mult > 0.0 && self.depth_mult > 0.0) {
            return Err(Error::invalid("width_mult and depth_mult must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            width_mult: self.width_mult,
            depth_mult: self.depth_mult,
            use_c2f_repvitcamf: self.use_c2f_repvitcamf,
            use_mscaf: self.use_mscaf,
            use_kan_bottleneck: self.use_kan_bottleneck,
            num_classes: self.num_classes,
            ..ModelConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate at `epoch` of `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
