//! AdamW with decoupled weight decay, linear warmup and cosine decay.
//!
//! Moment buffers are keyed by parameter name in a sorted map, so the
//! update order never depends on traversal order and checkpoints restore
//! byte-identical state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup from 0 over this many steps.
    pub warmup_iters: usize,
    /// Step at which the cosine schedule reaches zero.
    pub max_iters: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_iters: 10,
            max_iters: 200,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0,1)")));
            }
        }
        Ok(())
    }

    /// Learning rate at a 1-based step: linear warmup to `lr`, then cosine
    /// decay that reaches exactly zero at `max_iters`.
    pub fn effective_lr(&self, iter: usize) -> f64 {
        if self.warmup_iters > 0 && iter <= self.warmup_iters {
            return self.lr * iter as f64 / self.warmup_iters as f64;
        }
        if iter >= self.max_iters {
            return 0.0;
        }
        let span = (self.max_iters - self.warmup_iters).max(1) as f64;
        let t = (iter - self.warmup_iters) as f64 / span;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW state: step counter plus first/second moment estimates per
/// parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub iter: usize,
    pub slots: BTreeMap<String, MomentSlot>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            iter: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once per batch before `apply`.
    pub fn begin_step(&mut self) {
        self.iter += 1;
    }

    /// Applies one AdamW update to a parameter using its accumulated
    /// gradient, then leaves the gradient untouched for the caller to
    /// zero.
    pub fn apply(&mut self, param: &mut Param) {
        let slot = self.slots.entry(param.name.clone()).or_insert_with(|| MomentSlot {
            m: Tensor::zeros(param.value.shape()),
            v: Tensor::zeros(param.value.shape()),
        });
        let lr = self.cfg.effective_lr(self.iter);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.iter as i32);
        let bc2 = 1.0 - b2.powi(self.iter as i32);
        let value = param.value.data_mut();
        let grad = param.grad.data();
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                + self.cfg.weight_decay * value[i]);
        }
    }
}
