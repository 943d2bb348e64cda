//! AdamW with decoupled weight decay, and a cosine learning-rate schedule
//! with optional linear warmup.
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · m̂ / (√v̂ + ε) − lr · wd · θ      (m̂, v̂ bias-corrected)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
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
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::param("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta2", "must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::param("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Moment buffers for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Zeroed buffers shaped like `tensor_lens`.
    pub fn new(config: AdamWConfig, tensor_lens: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update of `params` in place at learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dims(
                format!("{} tensors", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::dims(
                    format!("tensor {k} of length {}", self.m[k].len()),
                    format!("param {} / grad {}", p.len(), g.len()),
                ));
            }
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::param("lr", format!("must be finite and nonnegative, got {lr}")));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(warmup_epochs: usize, total_epochs: usize, base_lr: f64, min_lr: f64) -> Result<Self> {
        if total_epochs > 0 && warmup_epochs >= total_epochs {
            return Err(Error::param("warmup_epochs", format!("{warmup_epochs} must be below total_epochs {total_epochs}")));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::param("base_lr", format!("must be positive, got {base_lr}")));
        }
        if !(min_lr >= 0.0 && min_lr <= base_lr) {
            return Err(Error::param("min_lr", format!("must lie in [0, base_lr], got {min_lr}")));
        }
        Ok(Self { warmup_epochs, total_epochs, base_lr, min_lr })
    }

    /// Learning rate at a (possibly fractional) epoch in `[0, total_epochs]`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        let total = self.total_epochs as f64;
        if !(0.0..=total).contains(&epoch) {
            return Err(Error::param("epoch", format!("{epoch} outside [0, {total}]")));
        }
        let warm = self.warmup_epochs as f64;
        if epoch < warm {
            return Ok(self.base_lr * epoch / warm);
        }
        let progress = (epoch - warm) / (total - warm);
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}
