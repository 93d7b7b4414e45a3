use serde::{Deserialize, Serialize};

use crate::compute::AdamConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};

/// Which loss a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Teacher-forced autoregressive cross-entropy.
    At,
    /// Conditional masked LM (mask-predict student).
    Cmlm,
    /// Glancing training (single-pass student).
    Glat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Padded tokens per batch.
    pub tokens_per_batch: usize,
    pub warmup_steps: usize,
    pub peak_lr: f32,
    pub label_smoothing: f32,
    /// Glancing ratio at the first and last step; decays linearly.
    pub glancing_start: f32,
    pub glancing_end: f32,
    pub length_loss_weight: f32,
    /// Steps between validation decodes; the last step always validates.
    pub valid_interval: usize,
    /// Best checkpoints averaged at the end (K).
    pub checkpoints_to_average: usize,
    pub validation: DecodeConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            tokens_per_batch: 512,
            warmup_steps: 100,
            peak_lr: 2e-3,
            label_smoothing: 0.1,
            glancing_start: 0.5,
            glancing_end: 0.3,
            length_loss_weight: 0.1,
            valid_interval: 100,
            checkpoints_to_average: 5,
            validation: DecodeConfig::default(),
            adam: AdamConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steps > 0
            && self.tokens_per_batch > 0
            && self.peak_lr > 0.0
            && (0.0..=1.0).contains(&self.glancing_start)
            && (0.0..=1.0).contains(&self.glancing_end)
            && (0.0..1.0).contains(&self.label_smoothing)
            && self.length_loss_weight >= 0.0
            && self.valid_interval > 0
            && self.checkpoints_to_average >= 1;
        if !ok {
            return Err(Error::config(
                "train: need steps > 0, tokens_per_batch > 0, lr > 0, glancing ratios in [0,1], \
                 smoothing in [0,1), valid_interval > 0, checkpoints_to_average >= 1",
            ));
        }
        let validations =
            self.steps / self.valid_interval + usize::from(!self.steps.is_multiple_of(self.valid_interval));
        if validations < self.checkpoints_to_average {
            return Err(Error::config(format!(
                "train: {validations} validations cannot supply {} checkpoints",
                self.checkpoints_to_average
            )));
        }
        Ok(())
    }

    /// Inverse-square-root schedule with linear warmup; `step` is 1-based.
    pub fn learning_rate(&self, step: usize) -> f32 {
        let step = step.max(1) as f32;
        let warm = self.warmup_steps.max(1) as f32;
        self.peak_lr * (step / warm).min((warm / step).sqrt())
    }

    /// Linearly decayed glancing ratio; `step` is 1-based.
    pub fn glancing_ratio(&self, step: usize) -> f32 {
        let frac = if self.steps <= 1 {
            1.0
        } else {
            ((step.max(1) - 1) as f32 / (self.steps - 1) as f32).min(1.0)
        };
        self.glancing_start + (self.glancing_end - self.glancing_start) * frac
    }
}
