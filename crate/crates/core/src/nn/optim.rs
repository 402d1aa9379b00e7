use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{Mat, ParamId, ParamStore};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_min: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 1000,
            total_steps: 10_000,
            lr_min: 1e-5,
        }
    }
}

/// Linear warmup from 0 to `lr`, cosine decay to `lr_min` at `total_steps`,
/// then constant.
pub fn lr_schedule(step: u64, cfg: &AdamWConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return if cfg.total_steps <= cfg.warmup_steps { cfg.lr } else { cfg.lr_min };
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad = p.grad.map(|g| g * s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        Self { config, first: zeros(), second: zeros(), decay: alloc::vec![true; store.len()], step: 0 }
    }

    /// Turns weight decay off or on for one parameter.
    pub fn set_decay(&mut self, id: ParamId, on: bool) {
        self.decay[id.0] = on;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.step + 1, &self.config)
    }

    /// Applies one update from the store's gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (p, m) in store.iter().zip(&self.first) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {} changed shape", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let lr = lr_schedule(self.step, &c);
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, m), v), &decay) in store.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(&self.decay) {
            let wd = if decay { c.weight_decay } else { 0.0 };
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), m), v) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= lr * wd * *w;
                if m_hat != 0.0 {
                    *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
