//! SGD with momentum, weight decay and step learning-rate decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays.
    pub lr_decay_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.9,
            lr_decay_every: 10,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sgd.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("sgd.momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("sgd.weight_decay must be non-negative".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("sgd.lr_decay_factor must lie in (0, 1]".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("sgd.lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// `learning_rate · factor^floor(epoch / every)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(steps)
    }
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v ← μ·v + g + wd·p; p ← p − lr·v`, with `lr` taken from the epoch schedule.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], epoch: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("sgd_step", &[params.len()], &[grads.len()]));
        }
        for (slot, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(slot).shape() {
                return Err(Error::dim("sgd_step", params.tensor(slot).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    params.name(slot)
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let lr = self.cfg.lr_at_epoch(epoch);
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (slot, g) in grads.iter().enumerate() {
            let v = &mut self.velocity[slot];
            let p = params.tensor_mut(slot).data_mut();
            for i in 0..p.len() {
                v[i] = mu * v[i] + g.data()[i] + wd * p[i];
                p[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}
