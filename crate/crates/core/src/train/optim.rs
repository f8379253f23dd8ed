use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair of buffers per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimError {
    pub param: String,
    pub expected: usize,
    pub got: usize,
}

impl core::fmt::Display for OptimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "optimizer state for {} has {} entries, parameter has {}", self.param, self.got, self.expected)
    }
}

impl core::error::Error for OptimError {}

impl AdamState {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected Adam update using each parameter's accumulated gradient.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<(), OptimError> {
        if self.m.len() != params.len() {
            return Err(OptimError { param: "<store>".into(), expected: params.len(), got: self.m.len() });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Float::powi(BETA1, t);
        let c2 = 1.0 - Float::powi(BETA2, t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.value.len() {
                return Err(OptimError { param: p.name.clone(), expected: p.value.len(), got: m.len() });
            }
            let grad = p.grad.as_ref().map(|g| g.values());
            for (j, w) in p.value.values_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[j].as_f64());
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let update = lr * (m[j] / c1) / (Float::sqrt(v[j] / c2) + ADAM_EPS);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.values().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = Float::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let k = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.values_mut().iter_mut().for_each(|v| *v = *v * k);
            }
        }
    }
    norm
}

/// Linear warmup then stepwise decay counted from the end of warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub decay_factor: f64,
    pub decay_every: f64,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, steps_per_epoch: usize) -> Self {
        Self { base_lr, warmup_epochs: 20.0, decay_factor: 0.95, decay_every: 25.0, steps_per_epoch }
    }

    /// Rate at fractional epoch `e`.
    pub fn lr_at_epoch(&self, e: f64) -> f64 {
        let warm = if self.warmup_epochs > 0.0 { (e / self.warmup_epochs).min(1.0) } else { 1.0 };
        let decays = Float::floor((e - self.warmup_epochs).max(0.0) / self.decay_every);
        self.base_lr * warm * Float::powf(self.decay_factor, decays)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_at_epoch(step as f64 / self.steps_per_epoch.max(1) as f64)
    }
}
