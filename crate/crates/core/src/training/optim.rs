use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::params::{Gradients, ParamSet, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 50,
            grad_clip_norm: 1.0,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "gradient clip norm must be > 0, got {}",
                self.grad_clip_norm
            )));
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(F::of(max_norm / norm));
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(params: &ParamSet<F>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. A zero gradient on a parameter whose moments are still
    /// zero leaves that parameter bit-identical.
    pub fn step<F: Real>(&mut self, params: &mut ParamSet<F>, grads: &Gradients<F>) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let tensors = params.tensors_mut();
        for (((t, g), m), v) in tensors.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &gi), mi), vi) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                if update != 0.0 {
                    *p = F::of(p.as_f64() - update);
                }
            }
        }
    }
}
