use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), String> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(format!("betas must lie in (0,1): {} {}", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err("weight_decay must be >= 0 and eps > 0".into());
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay. Moment buffers are kept per parameter
/// slot and allocated lazily on first update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Advances the step counter. Call once per optimisation step, before
    /// the per-parameter [`AdamW::update`] calls of that step.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Updates parameter `slot` in place.
    pub fn update(
        &mut self,
        slot: usize,
        param: &mut Tensor,
        grad: &Tensor,
        lr: f64,
    ) -> Result<(), TensorError> {
        if param.shape() != grad.shape() && param.len() != grad.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        assert!(self.step_count > 0, "begin_step must precede update");
        if self.moments.len() <= slot {
            self.moments.resize(slot + 1, None);
        }
        let (m, v) = self.moments[slot]
            .get_or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        if m.len() != param.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw moments",
                lhs: m.shape().to_vec(),
                rhs: param.shape().to_vec(),
            });
        }
        let c = &self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *p *= decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_fraction: f64, total_steps: usize) -> Result<Self, TensorError> {
        if !(peak_lr > 0.0) || !(0.0..1.0).contains(&warmup_fraction) || total_steps == 0 {
            return Err(TensorError::Invalid(format!(
                "invalid schedule: peak {peak_lr}, warmup {warmup_fraction}, total {total_steps}"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_fraction,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, TensorError> {
        if step > self.total_steps {
            return Err(TensorError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let total = self.total_steps as f64;
        let warm = self.warmup_fraction * total;
        let s = step as f64;
        if s < warm {
            return Ok(self.peak_lr * s / warm);
        }
        let progress = (s - warm) / (total - warm);
        Ok(self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
