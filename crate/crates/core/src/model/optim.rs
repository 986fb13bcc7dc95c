//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{Matrix, ParamSet, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
    decay: Vec<bool>,
}

/// Weight decay applies to linear weight matrices only; biases, norm
/// gains and the mask token are exempt.
pub fn decays(name: &str, value_rows: usize) -> bool {
    name.ends_with(".weight") && value_rows > 1
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            decay: decay_flags(params),
        }
    }

    /// Restores saved moments; shapes must match the parameters.
    pub fn from_state(
        config: AdamWConfig,
        params: &ParamSet<T>,
        m: Vec<Matrix<T>>,
        v: Vec<Matrix<T>>,
        step: u64,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(shape("optimizer state", params.len(), m.len().min(v.len())));
        }
        for ((p, a), b) in params.values().iter().zip(&m).zip(&v) {
            if p.shape() != a.shape() || p.shape() != b.shape() {
                return Err(shape(
                    "optimizer moment",
                    format!("{:?}", p.shape()),
                    format!("{:?}", a.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            m,
            v,
            step,
            decay: decay_flags(params),
        })
    }

    /// One update at learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(shape("gradients", params.len(), grads.len()));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(invalid(format!("learning rate {lr}")));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let eps = T::lit(c.eps);
        let lr_t = T::lit(lr);
        let shrink = T::lit(1.0 - lr * c.weight_decay);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(shape(
                    "gradient",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let decay = self.decay[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if decay {
                    *w *= shrink;
                }
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn decay_flags<T: Real>(params: &ParamSet<T>) -> Vec<bool> {
    params
        .ids()
        .map(|id| decays(params.name(id), params.get(id).rows()))
        .collect()
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay
/// to `min_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
