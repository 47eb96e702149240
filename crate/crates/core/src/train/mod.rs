//! Losses, active-frame selection, the Adam optimizer, the training loop and
//! checkpoints.

mod adam;
mod checkpoint;
mod fit;
mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, RngState};
pub use fit::{epoch_dir, fit, fit_img2heatmap, EpochLog, FitOptions, HeatmapSample, TrainState};
pub use loss::{
    check_combined_loss_gradients, combined_loss, loss_ant_l2, loss_ant_triplet, select_active_frame, LossBreakdown,
    LossOutput, Sample, TrainSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub ant: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, ant: 0.1, aux: 1.0 }
    }
}

impl LossWeights {
    /// Whether the inactive branch contributes to the loss at all.
    pub fn uses_inactive(&self) -> bool {
        self.ant != 0.0 || self.aux != 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntLossMode {
    #[default]
    L2,
    Triplet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Frames per training chunk.
    pub chunk_len: usize,
    pub ant_loss: AntLossMode,
    pub margin: f64,
    pub weights: LossWeights,
    /// Leading epochs trained with the classification loss alone, so the
    /// encoder has discriminative features before distillation starts.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            chunk_len: 8,
            ant_loss: AntLossMode::L2,
            margin: 0.5,
            weights: LossWeights::default(),
            warmup_epochs: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be nonnegative");
        }
        if self.batch_size == 0 || self.chunk_len == 0 {
            return bad("train.batch_size and train.chunk_len must be positive");
        }
        if self.ant_loss == AntLossMode::Triplet && self.margin <= 0.0 {
            return bad("train.margin must be positive in triplet mode");
        }
        let w = self.weights;
        if [w.cls, w.ant, w.aux].iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return bad("loss weights must be finite and nonnegative");
        }
        Ok(())
    }

    /// The configuration in effect during `epoch` (1-based).
    pub fn for_epoch(&self, epoch: usize) -> TrainConfig {
        let mut cfg = self.clone();
        if epoch <= self.warmup_epochs {
            cfg.weights.ant = 0.0;
            cfg.weights.aux = 0.0;
        }
        cfg
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}
