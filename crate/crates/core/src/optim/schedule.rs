use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Training images are rotated by a uniform angle in `[-r, r]` degrees.
    pub rotation_degrees: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            batch_size: 8,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            rotation_degrees: 15.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is accepted: it freezes the weights, which is
        // how training runs are checked for side effects.
        if !(self.initial_lr.is_finite() && self.initial_lr >= 0.0) {
            return Err(Error::Config(format!(
                "initial_lr must be finite and >= 0, got {}",
                self.initial_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(Error::Config(format!(
                "rotation_degrees must lie in [0, 180], got {}",
                self.rotation_degrees
            )));
        }
        Ok(())
    }

    /// Per-update decay: `initial_lr / epochs`.
    pub fn decay_rate(&self) -> f64 {
        self.initial_lr / self.epochs as f64
    }
}

/// Inverse-time decay applied per optimizer update:
/// `initial_lr / (1 + decay * iteration)`.
pub fn decayed_lr(config: &TrainConfig, iteration: u64) -> f64 {
    config.initial_lr / (1.0 + config.decay_rate() * iteration as f64)
}
