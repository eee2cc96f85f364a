use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::diffcore::AdamConfig;
use crate::error::{input_err, Error, Result};
use crate::sequence::{MaskMode, FINETUNE_WEIGHTS, PRETRAIN_WEIGHTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage0,
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage0 => "stage0",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Hyper-parameters of one training stage. Missing JSON fields take the
/// [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Sequences per batch.
    pub batch_size: usize,
    /// Single epochs per stage-0 batch.
    pub epoch_batch_size: usize,
    pub steps: usize,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub tau: f64,
    /// Sequence-loss head weights; stage default when absent.
    pub loss_weights: Option<[f64; 3]>,
    /// Adds the InfoNCE epoch loss during pre-training.
    pub contrastive: bool,
    pub validate_every: usize,
    /// Validation events without strict improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Window stride; the sequence length when absent.
    pub stride: Option<usize>,
    pub seed: u64,
    pub augment: bool,
    /// Allows pre-training without stage-0 weights.
    pub from_scratch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            model: ModelConfig::paper(),
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            batch_size: 32,
            epoch_batch_size: 32,
            steps: 10_000,
            mask_ratio: 0.5,
            mask_mode: MaskMode::Independent,
            tau: 0.1,
            loss_weights: None,
            contrastive: true,
            validate_every: 100,
            patience: 1000,
            val_fraction: 0.1,
            stride: None,
            seed: 0,
            augment: true,
            from_scratch: false,
        }
    }
}

impl TrainConfig {
    /// Reduced model and batch sizes for single-core runs.
    pub fn desk(stage: Stage) -> Self {
        TrainConfig { stage, model: ModelConfig::desk(), batch_size: 4, epoch_batch_size: 32, patience: 20, steps: 2000, ..Default::default() }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn weights(&self) -> [f64; 3] {
        self.loss_weights.unwrap_or(match self.stage {
            Stage::Finetune => FINETUNE_WEIGHTS,
            _ => PRETRAIN_WEIGHTS,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.model.seq_len)
    }

    /// Mask ratio actually used: fine-tuning never masks.
    pub fn effective_mask_ratio(&self) -> f64 {
        if self.stage == Stage::Finetune {
            0.0
        } else {
            self.mask_ratio
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: AdamConfig::default().eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epoch_batch_size == 0 {
            return Err(input_err!("batch sizes must be positive"));
        }
        if self.validate_every == 0 || self.patience == 0 {
            return Err(input_err!("validate_every and patience must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(input_err!("val_fraction must lie in [0,1), got {}", self.val_fraction));
        }
        if !(self.lr > 0.0 && self.tau > 0.0) {
            return Err(input_err!("lr and tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(input_err!("mask_ratio must lie in [0,1], got {}", self.mask_ratio));
        }
        Ok(())
    }

    pub(crate) fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(input_err!("config stage is {}, expected {}", self.stage.name(), stage.name()));
        }
        Ok(())
    }
}
