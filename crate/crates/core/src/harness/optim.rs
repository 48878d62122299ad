//! Adam with L2 weight decay, and the warmup/step learning-rate schedule.

use crate::error::{domain, shape, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Moment estimates for one parameter group. Each group keeps its own step
/// count, so a group frozen for a while resumes with correct bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` along `grad`; `decay` toggles weight decay.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [f64], grad: &[f64], decay: bool) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(shape("optimizer state and parameter lengths differ"));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        for i in 0..params.len() {
            let g = grad[i] + wd * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Linear warmup from `start` to `peak`, then `peak · factor^⌊(e − warmup) / every⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { start: 1e-4, peak: 1e-2, warmup_epochs: 5, decay_factor: 0.5, decay_every: 20 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.peak > 0.0 && self.decay_factor > 0.0) {
            return Err(domain("learning rates and decay factor must be positive"));
        }
        if self.decay_every == 0 {
            return Err(domain("decay interval must be positive"));
        }
        Ok(())
    }

    /// Rate used throughout `epoch` (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let frac = epoch as f64 / self.warmup_epochs as f64;
            return self.start + (self.peak - self.start) * frac;
        }
        let steps = (epoch - self.warmup_epochs) / self.decay_every;
        self.peak * self.decay_factor.powi(steps as i32)
    }
}
