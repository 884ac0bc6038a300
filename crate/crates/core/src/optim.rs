//! Adaptive-moment optimizer with decoupled weight decay, and the cosine
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::param(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", format!("must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    /// Number of updates taken.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update of every parameter tensor with learning rate `lr`.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        assert_eq!(grads.len(), self.m.len(), "gradient list changed");
        self.step += 1;
        let AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * wd;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = T::of(p[i].f64() * decay - step);
            }
        }
    }
}

/// Cosine annealing from `lr_init` at iteration 0 to `lr_final` at `total`.
pub fn cosine_lr(iter: u64, total: u64, lr_init: f64, lr_final: f64) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(Error::param("iteration", format!("{iter} outside 0..={total}")));
    }
    let phase = std::f64::consts::PI * iter as f64 / total as f64;
    Ok(lr_final + (lr_init - lr_final) * (1.0 + phase.cos()) / 2.0)
}
