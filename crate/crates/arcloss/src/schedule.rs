//! Gaussian ramp-up / ramp-down schedules for the auxiliary-loss weight,
//! the learning rate, and Adam's beta1.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    /// Epochs of Gaussian ramp-up at the start (0 disables).
    pub rampup_len: usize,
    /// Epochs of Gaussian ramp-down at the end (0 disables).
    pub rampdown_len: usize,
    pub max_lr: f64,
    /// Apply the ramp-down to the auxiliary weight w(t) as well as lr/beta1.
    pub rampdown_weight: bool,
}

impl ScheduleConfig {
    pub fn new(total_epochs: usize) -> Self {
        ScheduleConfig {
            total_epochs,
            rampup_len: 80,
            rampdown_len: 50,
            max_lr: 0.003,
            rampdown_weight: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.rampup_len > 0
            && self.rampdown_len > 0
            && self.rampup_len + self.rampdown_len > self.total_epochs
        {
            return Err(Error::Config(format!(
                "rampup ({}) + rampdown ({}) exceed total epochs ({}); shorten or disable one",
                self.rampup_len, self.rampdown_len, self.total_epochs
            )));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::Config(format!("max_lr must be > 0, got {}", self.max_lr)));
        }
        Ok(())
    }
}

/// exp[-5 (1 - t/L)^2] for t < L, then 1.
pub fn rampup(t: usize, rampup_len: usize) -> f64 {
    if rampup_len == 0 || t >= rampup_len {
        return 1.0;
    }
    let r = 1.0 - t as f64 / rampup_len as f64;
    (-5.0 * r * r).exp()
}

/// 1 until the last `rampdown_len` epochs, then exp[-12.5 (1 - (T-t)/D)^2].
pub fn rampdown(t: usize, total_epochs: usize, rampdown_len: usize) -> f64 {
    if rampdown_len == 0 || t + rampdown_len <= total_epochs {
        return 1.0;
    }
    let r = 1.0 - (total_epochs - t) as f64 / rampdown_len as f64;
    (-12.5 * r * r).exp()
}

/// Scheduled values for epoch `t` (0-based, constant within the epoch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    /// Auxiliary-loss weight w(t).
    pub w: f64,
    /// Learning rate.
    pub lr: f64,
    /// Adam first-moment coefficient, ramped from 0.9 down to 0.5.
    pub beta1: f64,
}

pub fn schedule_values(t: usize, cfg: &ScheduleConfig) -> ScheduleValues {
    let up = rampup(t, cfg.rampup_len);
    let down = rampdown(t, cfg.total_epochs, cfg.rampdown_len);
    ScheduleValues {
        w: up * if cfg.rampdown_weight { down } else { 1.0 },
        lr: cfg.max_lr * up * down,
        beta1: 0.5 + 0.4 * down,
    }
}
