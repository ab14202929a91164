//! Decoupled-weight-decay Adam and the cosine learning-rate schedule shared
//! by both training stages.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_tensors: usize) -> Self {
        AdamW {
            cfg,
            m: (0..n_tensors).map(|_| None).collect(),
            v: (0..n_tensors).map(|_| None).collect(),
            t: 0,
        }
    }

    /// One update over the full store. `grads` is aligned with store order;
    /// `None` entries (unreached or frozen tensors) are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let theta = store.get_mut(name);
            for ((mi, vi), (ti, gi)) in m.iter_mut().zip(v.iter_mut()).zip(theta.iter_mut().zip(g))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *ti -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *ti);
            }
        }
    }
}

/// Cosine decay from `base_lr` to `min_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        CosineSchedule {
            base_lr,
            min_lr: base_lr * 0.01,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * s).cos())
    }
}
