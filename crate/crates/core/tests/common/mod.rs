//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use iwrs_core::corpus::{PointwiseExample, TokenId, TrainingInstance};
use iwrs_core::matcher::params::Gradients;
use iwrs_core::matcher::{Architecture, Hyper, Matcher, Role};
use iwrs_core::objectives::{cross_entropy_batch, weighted_margin_batch, MarginConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;
pub const FD_TOLERANCE: f64 = 1e-3;

pub const VOCAB: usize = 12;

pub fn tiny_hyper() -> Hyper {
    Hyper {
        embed_dim: 4,
        hidden_dim: 3,
        layers: 1,
        heads: 2,
        conv_channels: 2,
        match_dim: 3,
        max_len: 6,
    }
}

pub fn tiny_model(arch: Architecture, role: Role, seed: u64) -> Matcher<f64> {
    Matcher::new(arch, role, tiny_hyper(), VOCAB, seed).unwrap()
}

fn seq(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<TokenId> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(2..VOCAB as TokenId)).collect()
}

pub fn random_instances(n: usize, seed: u64) -> Vec<TrainingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let turns = rng.gen_range(0..=2);
            TrainingInstance {
                context: (0..turns).map(|_| seq(&mut rng, 1, 5)).collect(),
                anchor: seq(&mut rng, 1, 5),
                positive: seq(&mut rng, 1, 5),
                negative: seq(&mut rng, 1, 5),
                noise_flag: Some(rng.gen_bool(0.3)),
                source: i,
            }
        })
        .collect()
}

pub fn random_pointwise(n: usize, seed: u64) -> Vec<PointwiseExample> {
    random_instances(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, inst)| {
            let label = (i % 2) as u8;
            let mut turns = inst.context.clone();
            turns.push(inst.anchor.clone());
            PointwiseExample {
                turns,
                candidate: if label == 1 { inst.positive } else { inst.negative },
                label,
                noise_flag: None,
                source: i,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
    Margin,
}

pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Orients every instance so that its negative scores above its positive by
/// more than `gamma + 1e-3`, keeping every hinge active and away from the kink.
/// Instances that cannot be oriented that way are dropped.
pub fn active_instances(model: &Matcher<f64>, raw: Vec<TrainingInstance>, gamma: f64) -> Vec<TrainingInstance> {
    raw.into_iter()
        .filter_map(|mut inst| {
            let turns = inst.turns();
            let pp = model.score(&turns, &inst.positive).unwrap().value();
            let pn = model.score(&turns, &inst.negative).unwrap().value();
            if pp - pn > gamma + 1e-3 {
                std::mem::swap(&mut inst.positive, &mut inst.negative);
                Some(inst)
            } else if pn - pp > gamma + 1e-3 {
                Some(inst)
            } else {
                None
            }
        })
        .collect()
}

fn loss_and_grad(
    model: &Matcher<f64>,
    loss: Loss,
    points: &[PointwiseExample],
    pairs: &[(TrainingInstance, f64)],
    margin: MarginConfig,
) -> (f64, Gradients<f64>) {
    match loss {
        Loss::CrossEntropy => {
            let refs: Vec<&PointwiseExample> = points.iter().collect();
            cross_entropy_batch(model, &refs).unwrap()
        }
        Loss::Margin => {
            let refs: Vec<(&TrainingInstance, f64)> = pairs.iter().map(|(i, w)| (i, *w)).collect();
            weighted_margin_batch(model, &refs, margin, false).unwrap()
        }
    }
}

/// Central finite differences against the analytic gradient for every
/// parameter scalar of a tiny f64 model.
pub fn fd_check(arch: Architecture, loss: Loss) -> FdReport {
    let role = Role::ResponseSelection;
    let mut model = tiny_model(arch, role, 7);
    // Spread the weights so scores differ enough to orient pairs, and move
    // zero-initialised biases off the ReLU kink.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in model.params_mut().tensors_mut() {
        for v in t.data.iter_mut() {
            *v = *v * 8.0 + rng.gen_range(-0.2..0.2);
        }
    }
    let margin = MarginConfig { gamma: 0.02 };
    let points = random_pointwise(4, 11);
    let mut pairs: Vec<(TrainingInstance, f64)> = Vec::new();
    if loss == Loss::Margin {
        let active = active_instances(&model, random_instances(200, 13), margin.gamma);
        let weights = [1.0, 0.6, 0.35];
        pairs = active.into_iter().take(3).enumerate().map(|(i, inst)| (inst, weights[i])).collect();
        assert!(!pairs.is_empty(), "no instance with an active hinge");
    }
    let (_, grads) = loss_and_grad(&model, loss, &points, &pairs, margin);
    let analytic: Vec<f64> = grads.flatten();

    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut flat = 0;
    let num_tensors = model.params().tensors().len();
    for ti in 0..num_tensors {
        let len = model.params().tensors()[ti].data.len();
        for k in 0..len {
            let orig = model.params().tensors()[ti].data[k];
            model.params_mut().tensors_mut()[ti].data[k] = orig + FD_STEP;
            let (up, _) = loss_and_grad(&model, loss, &points, &pairs, margin);
            model.params_mut().tensors_mut()[ti].data[k] = orig - FD_STEP;
            let (down, _) = loss_and_grad(&model, loss, &points, &pairs, margin);
            model.params_mut().tensors_mut()[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[flat];
            let denom = a.abs().max(numeric.abs()).max(FD_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!(
                    "{}[{k}]: analytic {a:.6e}, numeric {numeric:.6e}",
                    model.params().tensors()[ti].name
                );
            }
            report.checked += 1;
            flat += 1;
        }
    }
    report
}
