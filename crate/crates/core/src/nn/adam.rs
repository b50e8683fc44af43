use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction and optional global-norm gradient clipping.
///
/// Moment buffers are keyed by parameter name so they can be written to and
/// restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(clip_norm: Option<f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients that belong to `stores`.
    pub fn grad_norm(stores: &[&ParamStore], grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for store in stores {
            for (_, var) in store.iter() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                }
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update with learning rate `lr` to every parameter in
    /// `stores` that received a gradient. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, stores: &[&ParamStore], grads: &GradStore, lr: f64) -> Result<f64> {
        let norm = Self::grad_norm(stores, grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "optimizer step".into(),
                detail: format!("gradient norm {norm}"),
            });
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for store in stores {
            for (name, var) in store.iter() {
                let Some(g) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let g = g.affine(scale, 0.0)?;
                let (m, v) = match self.moments.get(name) {
                    Some((m, v)) => (m.clone(), v.clone()),
                    None => (g.zeros_like()?, g.zeros_like()?),
                };
                let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
                let update = ((&m / bc1)? / denom)?;
                let next = (var.as_tensor() - (update * lr)?)?;
                var.set(&next.detach())?;
                self.moments.insert(name.to_string(), (m.detach(), v.detach()));
            }
        }
        Ok(norm)
    }

    /// Optimizer state as named tensors plus the step counter.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        (self.step, out)
    }

    pub fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix("m.") else { continue };
            let v = tensors
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::Incompatible(format!("optimizer state for {name} lacks a second moment")))?;
            moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}

/// Step-decay learning-rate schedule: `base * factor^k` after the k-th milestone.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<u64>,
}

impl StepDecay {
    /// Milestones every `fraction` of `max_iters` (e.g. 0.2 → at 20%, 40%, ...).
    pub fn every_fraction(base: f64, factor: f64, max_iters: u64, fraction: f64) -> Self {
        let stride = ((max_iters as f64) * fraction).round().max(1.0) as u64;
        let milestones = (1..).map(|i| i * stride).take_while(|&m| m < max_iters).collect();
        Self {
            base,
            factor,
            milestones,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}
