//! Optimizer settings shared by the alignment and training loops.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, LrSchedule, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub adamw: AdamWConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_fraction: 0.15,
            adamw: AdamWConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(format!("warmup_fraction {} outside [0,1)", self.warmup_fraction));
        }
        self.adamw.validate()
    }

    pub fn schedule(&self, total_steps: usize) -> Result<LrSchedule, TensorError> {
        LrSchedule::new(self.peak_lr, self.warmup_fraction, total_steps)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.adamw)
    }
}
