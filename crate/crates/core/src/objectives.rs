//! Pointwise cross-entropy and the pairwise weighted margin loss.
//!
//! Both losses are sums over instances. The scalar forms work on
//! probabilities; the batch forms run a matcher and return parameter
//! gradients obtained by back-propagating through the matching logit.

use serde::{Deserialize, Serialize};

use crate::corpus::{PointwiseExample, TrainingInstance};
use crate::error::{Error, Result};
use crate::matcher::graph::Graph;
use crate::matcher::params::{Gradients, Real};
use crate::matcher::{MatchProbability, Matcher};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub gamma: f64,
}

impl MarginConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        let c = Self { gamma };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_finite() && self.gamma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)))
        }
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { gamma: 0.25 }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Data(format!("{what}: lengths differ ({a} vs {b})")))
    }
}

fn check_label(y: u8) -> Result<f64> {
    match y {
        0 | 1 => Ok(y as f64),
        _ => Err(Error::Data(format!("label must be 0 or 1, got {y}"))),
    }
}

fn check_weight(w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::Data(format!("weight {w} outside [0,1]")))
    }
}

/// `-sum[y ln p + (1-y) ln(1-p)]`.
pub fn cross_entropy_loss(probs: &[MatchProbability], labels: &[u8]) -> Result<f64> {
    same_len(probs.len(), labels.len(), "cross entropy")?;
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let y = check_label(y)?;
        let p = p.value();
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total)
}

/// `dL/dp = (p - y) / (p (1 - p))` per instance.
pub fn cross_entropy_grad(probs: &[MatchProbability], labels: &[u8]) -> Result<Vec<f64>> {
    same_len(probs.len(), labels.len(), "cross entropy")?;
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let y = check_label(y)?;
            let p = p.value();
            Ok((p - y) / (p * (1.0 - p)))
        })
        .collect()
}

/// Hinge term `max{p_neg - p_pos - gamma, 0}`; the kink counts as inactive.
pub fn hinge(p_pos: f64, p_neg: f64, gamma: f64) -> f64 {
    (p_neg - p_pos - gamma).max(0.0)
}

/// `sum_i w_i max{p_neg_i - p_pos_i - gamma, 0}`.
pub fn weighted_margin_loss(
    pairs: &[(MatchProbability, MatchProbability)],
    weights: &[f64],
    config: MarginConfig,
) -> Result<f64> {
    same_len(pairs.len(), weights.len(), "weighted margin")?;
    config.validate()?;
    let mut total = 0.0;
    for (&(pp, pn), &w) in pairs.iter().zip(weights) {
        check_weight(w)?;
        if w != 0.0 {
            total += w * hinge(pp.value(), pn.value(), config.gamma);
        }
    }
    Ok(total)
}

/// Per-instance `(dL/dp_pos, dL/dp_neg)`: `(-w, w)` where the hinge is
/// active, zero elsewhere.
pub fn weighted_margin_grad(
    pairs: &[(MatchProbability, MatchProbability)],
    weights: &[f64],
    config: MarginConfig,
) -> Result<Vec<(f64, f64)>> {
    same_len(pairs.len(), weights.len(), "weighted margin")?;
    config.validate()?;
    pairs
        .iter()
        .zip(weights)
        .map(|(&(pp, pn), &w)| {
            check_weight(w)?;
            if w != 0.0 && hinge(pp.value(), pn.value(), config.gamma) > 0.0 {
                Ok((-w, w))
            } else {
                Ok((0.0, 0.0))
            }
        })
        .collect()
}

/// Sigmoid computed so that it never rounds to exactly 0 or 1 for moderate
/// logits.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Summed cross-entropy of a batch and its parameter gradient.
///
/// Uses the logit form `softplus(z) - y z`, which equals the probability
/// form and stays finite for saturated scores.
pub fn cross_entropy_batch<F: Real>(
    model: &Matcher<F>,
    batch: &[&PointwiseExample],
) -> Result<(f64, Gradients<F>)> {
    let mut grads = model.params().zero_grads();
    let mut total = 0.0;
    for ex in batch {
        let y = check_label(ex.label)?;
        let turns: Vec<&[u32]> = ex.turns.iter().map(|t| t.as_slice()).collect();
        let mut g = Graph::new(model.params());
        let z = model.logit(&mut g, &turns, &ex.candidate)?;
        let zv = g.value(z)[0].as_f64();
        total += softplus(zv) - y * zv;
        g.backward(z, F::of(sigmoid(zv) - y), &mut grads);
    }
    Ok((total, grads))
}

/// Summed cross-entropy without gradients.
pub fn cross_entropy_value<F: Real>(model: &Matcher<F>, batch: &[&PointwiseExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let y = check_label(ex.label)?;
        let turns: Vec<&[u32]> = ex.turns.iter().map(|t| t.as_slice()).collect();
        let mut g = Graph::new(model.params());
        let z = model.logit(&mut g, &turns, &ex.candidate)?;
        let zv = g.value(z)[0].as_f64();
        total += softplus(zv) - y * zv;
    }
    Ok(total)
}

/// Weighted margin loss of a batch and its parameter gradient.
///
/// With `skip_zero` set, zero-weight instances are skipped without running
/// the model; otherwise they are evaluated and contribute exact zeros.
pub fn weighted_margin_batch<F: Real>(
    model: &Matcher<F>,
    batch: &[(&TrainingInstance, f64)],
    config: MarginConfig,
    skip_zero: bool,
) -> Result<(f64, Gradients<F>)> {
    config.validate()?;
    let mut grads = model.params().zero_grads();
    let mut total = 0.0;
    for &(inst, w) in batch {
        check_weight(w)?;
        if skip_zero && w == 0.0 {
            continue;
        }
        let turns = inst.turns();
        let mut g = Graph::new(model.params());
        let zp = model.logit(&mut g, &turns, &inst.positive)?;
        let zn = model.logit(&mut g, &turns, &inst.negative)?;
        let pp = sigmoid(g.value(zp)[0].as_f64());
        let pn = sigmoid(g.value(zn)[0].as_f64());
        let h = hinge(pp, pn, config.gamma);
        if h > 0.0 {
            total += w * h;
            g.backward(zp, F::of(-w * pp * (1.0 - pp)), &mut grads);
            g.backward(zn, F::of(w * pn * (1.0 - pn)), &mut grads);
        }
    }
    Ok((total, grads))
}
