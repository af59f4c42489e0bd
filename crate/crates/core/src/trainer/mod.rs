//! Desk-scale training: schedules, delayed FSM insertion, synthetic data,
//! augmentation and heatmap targets.

pub mod augment;
pub mod heatmap;
pub mod run;
pub mod shift_task;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

pub use augment::{augment_sample, AffineDraw, AugmentRanges};
pub use heatmap::{decode_heatmap, heatmap_target};
pub use run::{evaluate_loss, StepMetrics, Trainer};
pub use shift_task::ShiftTaskSpec;
pub use synth::{matched_filter_accuracy, SynthSample, SynthSpec};

/// A dataset recipe: the cue/target heatmap task or the shifted-copy
/// regression task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    CueTarget(SynthSpec),
    ShiftedCopy(ShiftTaskSpec),
}

impl TaskSpec {
    pub fn generate(&self) -> Result<Vec<SynthSample>> {
        match self {
            TaskSpec::CueTarget(s) => s.generate(),
            TaskSpec::ShiftedCopy(s) => s.generate(),
        }
    }

    /// The same recipe with another sample count and seed.
    pub fn resampled(&self, count: usize, seed: u64) -> Self {
        match *self {
            TaskSpec::CueTarget(s) => TaskSpec::CueTarget(SynthSpec { count, seed, ..s }),
            TaskSpec::ShiftedCopy(s) => TaskSpec::ShiftedCopy(ShiftTaskSpec { count, seed, ..s }),
        }
    }
}

/// Step decay of the base learning rate: constant until `after`, then
/// multiplied by `factor` at `after` and every `every` iterations past it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrDecay {
    pub after: u64,
    pub factor: f64,
    pub every: u64,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            after: 30_000,
            factor: 0.5,
            every: 30_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Learning rate of the offsets at epoch 0.
    pub offset_lr: f64,
    pub offset_decay_per_epoch: f64,
    pub batch_size: usize,
    pub iterations: u64,
    /// FSMs are bypassed and frozen before this iteration.
    pub insertion_iteration: u64,
    pub lr_decay: LrDecay,
    pub augment: bool,
    pub augmentation: AugmentRanges,
    /// Samples per epoch; the dataset size when absent.
    pub epoch_samples: Option<usize>,
    /// Clamp offsets to the FSM input extent after every step.
    pub clamp_offsets: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            offset_lr: 1e-3,
            offset_decay_per_epoch: 0.10,
            batch_size: 16,
            iterations: 100_000,
            insertion_iteration: 6000,
            lr_decay: LrDecay::default(),
            augment: false,
            augmentation: AugmentRanges::default(),
            epoch_samples: None,
            clamp_offsets: true,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("base_lr", self.base_lr)?;
        positive("offset_lr", self.offset_lr)?;
        positive("lr_decay.factor", self.lr_decay.factor)?;
        if !(0.0..1.0).contains(&self.offset_decay_per_epoch) {
            return Err(Error::Config(format!(
                "offset_decay_per_epoch must lie in [0, 1), got {}",
                self.offset_decay_per_epoch
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_decay.every == 0 {
            return Err(Error::Config("lr_decay.every must be positive".into()));
        }
        if self.epoch_samples == Some(0) {
            return Err(Error::Config("epoch_samples must be positive".into()));
        }
        Ok(())
    }

    /// Base learning rate at `iteration`.
    pub fn base_lr_at(&self, iteration: u64) -> f64 {
        let d = &self.lr_decay;
        if iteration < d.after {
            self.base_lr
        } else {
            let n = (iteration - d.after) / d.every + 1;
            self.base_lr * d.factor.powi(n as i32)
        }
    }

    /// Offset learning rate in `epoch`: `offset_lr * (1 - decay)^epoch`.
    pub fn offset_lr_at(&self, epoch: u64) -> f64 {
        self.offset_lr * (1.0 - self.offset_decay_per_epoch).powi(epoch as i32)
    }

    pub fn iterations_per_epoch(&self, dataset_len: usize) -> u64 {
        let n = self.epoch_samples.unwrap_or(dataset_len).max(1);
        n.div_ceil(self.batch_size) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(c.offset_lr_at(0), 1e-3);
        assert!((c.offset_lr_at(1) - 9e-4).abs() < 1e-18);
        assert!((c.offset_lr_at(10) - 3.486784401e-4).abs() < 1e-12);
    }

    #[test]
    fn base_schedule_halves_at_decay_points() {
        let c = TrainConfig {
            lr_decay: LrDecay {
                after: 100,
                factor: 0.5,
                every: 50,
            },
            ..Default::default()
        };
        assert_eq!(c.base_lr_at(0), 5e-4);
        assert_eq!(c.base_lr_at(99), 5e-4);
        assert_eq!(c.base_lr_at(100), 2.5e-4);
        assert_eq!(c.base_lr_at(149), 2.5e-4);
        assert_eq!(c.base_lr_at(150), 1.25e-4);
    }

    #[test]
    fn bad_decay_rejected() {
        let c = TrainConfig {
            offset_decay_per_epoch: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
