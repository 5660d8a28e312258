use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from 0, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

pub const DEFAULT_MIN_LR: f64 = 1e-6;

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("epochs", "need at least one epoch and one step"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!("{} must be below epochs={}", self.warmup_epochs, self.total_epochs),
            ));
        }
        if !(self.min_lr <= self.base_lr) || self.min_lr < 0.0 {
            return Err(Error::config("min_lr", format!("must lie in [0, lr={}]", self.base_lr)));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Learning rate for 0-based `step`. The decay reaches `min_lr` at the
    /// last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        let span = self.total_steps().saturating_sub(1).saturating_sub(warm);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - warm) as f64 / span as f64).min(1.0)
        };
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// `base · γ^(depth − layer)`; the head sits at `layer = depth`.
pub fn layerwise_lr(base: f64, layer: usize, depth: usize, decay: f64) -> f64 {
    base * decay.powi(depth.saturating_sub(layer) as i32)
}
