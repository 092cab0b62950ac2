//! AdamW with decoupled weight decay and a warmup + cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{GradientBundle, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear ramp from 0 over `warmup_steps`, then cosine decay to 0 at `total_steps`.
    WarmupCosine {
        base_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupCosine {
                base_lr,
                warmup_steps,
                total_steps,
            } => {
                if step < warmup_steps {
                    return base_lr * step as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    schedule: LrSchedule,
    m: Vec<f64>,
    v: Vec<f64>,
    updates: u64,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize, config: AdamWConfig, schedule: LrSchedule) -> Self {
        Self {
            config,
            schedule,
            m: vec![0.0; len],
            v: vec![0.0; len],
            updates: 0,
            step: 0,
        }
    }

    /// Starts the schedule at `step` instead of 0.
    pub fn starting_at(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Advances the schedule without touching parameters or moments.
    pub fn skip(&mut self) -> f64 {
        let lr = self.current_lr();
        self.step += 1;
        lr
    }

    /// One update; frozen layers are left untouched. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientBundle) -> Result<f64> {
        if grads.values.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }
        let frozen = params.frozen_mask();
        if let Some(k) = (0..grads.values.len()).find(|&k| !frozen[k] && !grads.values[k].is_finite()) {
            let layer = params
                .layers()
                .iter()
                .find(|l| l.param_range().contains(&k))
                .map(|l| l.name())
                .unwrap_or_default();
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at parameter {k} ({layer}), step {}",
                grads.values[k], self.step
            )));
        }
        let lr = self.current_lr();
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = (self.updates + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let values = params.values_mut();
        for k in 0..values.len() {
            if frozen[k] {
                continue;
            }
            let g = grads.values[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            values[k] *= 1.0 - lr * weight_decay;
            values[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
        self.updates += 1;
        self.step += 1;
        Ok(lr)
    }
}
