//! Per-instance training weights.
//!
//! The main strategy scores each pairwise instance with the complementary
//! last-utterance model: a response that really answers the context makes
//! the true last utterance easy to pick out, so its delta
//! `Pr(q+ | U, r) - Pr(q- | U, r)` is high. The weight is the clamped gap
//! between the positive's and the negative's deltas. Heuristic baselines
//! are provided for comparison.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{draw_other, parse_jsonl, read_jsonl, to_jsonl, TokenId, TrainingInstance};
use crate::error::{Error, Result};
use crate::matcher::params::Real;
use crate::matcher::{Matcher, Role};

/// `Pr(q+ | .) - Pr(q- | .)`, strictly inside (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DeltaScore(f64);

impl DeltaScore {
    pub fn new(value: f64) -> Result<Self> {
        if value > -1.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Data(format!("delta {value} is not inside (-1,1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Wm,
    Uniform,
    Random,
    Jaccard,
    Embedding,
    ResponseModel,
    SingleTurnWm,
    Dual,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Wm,
        Strategy::Uniform,
        Strategy::Random,
        Strategy::Jaccard,
        Strategy::Embedding,
        Strategy::ResponseModel,
        Strategy::SingleTurnWm,
        Strategy::Dual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Wm => "wm",
            Strategy::Uniform => "uniform",
            Strategy::Random => "random",
            Strategy::Jaccard => "jaccard",
            Strategy::Embedding => "embedding",
            Strategy::ResponseModel => "response_model",
            Strategy::SingleTurnWm => "single_turn_wm",
            Strategy::Dual => "dual",
        }
    }

    /// Needs a last-utterance model.
    pub fn needs_utterance_model(self) -> bool {
        matches!(self, Strategy::Wm | Strategy::SingleTurnWm | Strategy::Dual)
    }

    /// Needs the response model.
    pub fn needs_response_model(self) -> bool {
        matches!(self, Strategy::Embedding | Strategy::ResponseModel)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub strategy: Strategy,
    pub epsilon: f64,
    pub seed: u64,
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("epsilon must be finite".into()))
        }
    }
}

/// One line of a weights file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedInstance {
    pub instance_index: usize,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_pos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_neg: Option<f64>,
}

impl WeightedInstance {
    fn plain(instance_index: usize, weight: f64) -> Self {
        Self {
            instance_index,
            weight,
            delta_pos: None,
            delta_neg: None,
        }
    }
}

/// Models available to [`compute_weights`].
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightModels<'a, F: Real> {
    pub utterance: Option<&'a Matcher<F>>,
    pub response: Option<&'a Matcher<F>>,
}

/// `min{max{delta_pos - delta_neg + epsilon, 0}, 1}`.
pub fn weight_from_deltas(delta_pos: DeltaScore, delta_neg: DeltaScore, epsilon: f64) -> f64 {
    (delta_pos.0 - delta_neg.0 + epsilon).clamp(0.0, 1.0)
}

fn with_final<'a>(context: &'a [Vec<TokenId>], last: &'a [TokenId]) -> Vec<&'a [TokenId]> {
    context
        .iter()
        .map(|t| t.as_slice())
        .chain(std::iter::once(last))
        .collect()
}

/// `Pr(q_pos | U, r) - Pr(q_neg | U, r)` under a last-utterance model; the
/// response is appended to the context as its final turn.
pub fn delta<F: Real>(
    model_utte: &Matcher<F>,
    context: &[Vec<TokenId>],
    response: &[TokenId],
    q_pos: &[TokenId],
    q_neg: &[TokenId],
) -> Result<DeltaScore> {
    if model_utte.role() != Role::LastUtteranceSelection {
        return Err(Error::Model(
            "delta needs a last-utterance selection model".into(),
        ));
    }
    delta_any(model_utte, context, response, q_pos, q_neg)
}

/// Role-agnostic delta: `Pr(a_pos | U + [x]) - Pr(a_neg | U + [x])`.
fn delta_any<F: Real>(
    model: &Matcher<F>,
    context: &[Vec<TokenId>],
    x: &[TokenId],
    a_pos: &[TokenId],
    a_neg: &[TokenId],
) -> Result<DeltaScore> {
    if a_pos == a_neg {
        return Ok(DeltaScore(0.0));
    }
    let turns = with_final(context, x);
    let p = model.score(&turns, a_pos)?.value();
    let n = model.score(&turns, a_neg)?.value();
    DeltaScore::new(p - n)
}

/// One distractor anchor per instance, drawn from other instances' anchors.
fn draw_negative_anchors(instances: &[TrainingInstance], seed: u64) -> Result<Vec<usize>> {
    if instances.len() < 2 {
        return Err(Error::Data("delta weighting needs at least two instances".into()));
    }
    let anchors: Vec<&Vec<TokenId>> = instances.iter().map(|i| &i.anchor).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances.len())
        .map(|i| {
            draw_other(&mut rng, &anchors, i).ok_or_else(|| {
                Error::Data(format!("instance {i}: every other anchor is identical"))
            })
        })
        .collect()
}

/// Delta weights where `model` scores anchors given (context, candidate).
///
/// For response-task instances this is the last-utterance method; for
/// last-utterance-task instances (anchor = response, candidates = last
/// utterances) with a response model it is the role-mirrored variant.
fn delta_weights<F: Real>(
    model: &Matcher<F>,
    instances: &[TrainingInstance],
    epsilon: f64,
    seed: u64,
    single_turn: bool,
) -> Result<Vec<WeightedInstance>> {
    let negs = draw_negative_anchors(instances, seed)?;
    let empty: Vec<Vec<TokenId>> = Vec::new();
    instances
        .iter()
        .zip(negs)
        .enumerate()
        .map(|(i, (inst, j))| {
            let context = if single_turn { &empty } else { &inst.context };
            let q_neg = &instances[j].anchor;
            let dp = delta_any(model, context, &inst.positive, &inst.anchor, q_neg)?;
            let dn = delta_any(model, context, &inst.negative, &inst.anchor, q_neg)?;
            Ok(WeightedInstance {
                instance_index: i,
                weight: weight_from_deltas(dp, dn, epsilon),
                delta_pos: Some(dp.value()),
                delta_neg: Some(dn.value()),
            })
        })
        .collect()
}

/// Weights for last-utterance-task instances computed from the response
/// model (the second half of a dual round).
pub fn mirrored_weights<F: Real>(
    model_res: &Matcher<F>,
    instances: &[TrainingInstance],
    epsilon: f64,
    seed: u64,
) -> Result<Vec<WeightedInstance>> {
    if model_res.role() != Role::ResponseSelection {
        return Err(Error::Model("mirrored weights need a response selection model".into()));
    }
    delta_weights(model_res, instances, epsilon, seed, false)
}

pub fn jaccard(a: &[TokenId], b: &[TokenId]) -> f64 {
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn require<'a, F: Real>(m: Option<&'a Matcher<F>>, role: Role, s: Strategy) -> Result<&'a Matcher<F>> {
    let m = m.ok_or_else(|| Error::Model(format!("strategy {s} needs a {role} model")))?;
    if m.role() != role {
        return Err(Error::Model(format!("strategy {s} needs a {role} model, got {}", m.role())));
    }
    Ok(m)
}

/// Weights for every instance under the configured strategy. Results do not
/// depend on evaluation order; all randomness comes from `config.seed`.
pub fn compute_weights<F: Real>(
    config: &WeightConfig,
    instances: &[TrainingInstance],
    models: WeightModels<'_, F>,
) -> Result<Vec<WeightedInstance>> {
    config.validate()?;
    let s = config.strategy;
    match s {
        Strategy::Uniform => Ok((0..instances.len()).map(|i| WeightedInstance::plain(i, 1.0)).collect()),
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            Ok((0..instances.len())
                .map(|i| WeightedInstance::plain(i, rng.gen_range(0.0..=1.0)))
                .collect())
        }
        Strategy::Jaccard => Ok(instances
            .iter()
            .enumerate()
            .map(|(i, inst)| WeightedInstance::plain(i, jaccard(&inst.positive, &inst.negative)))
            .collect()),
        Strategy::Embedding => {
            let m = require(models.response, Role::ResponseSelection, s)?;
            instances
                .iter()
                .enumerate()
                .map(|(i, inst)| {
                    let vp = m.represent(&inst.positive)?;
                    let vn = m.represent(&inst.negative)?;
                    Ok(WeightedInstance::plain(i, cosine(&vp, &vn).clamp(0.0, 1.0)))
                })
                .collect()
        }
        Strategy::ResponseModel => {
            let m = require(models.response, Role::ResponseSelection, s)?;
            let negs = draw_negative_anchors(instances, config.seed)?;
            instances
                .iter()
                .zip(negs)
                .enumerate()
                .map(|(i, (inst, j))| {
                    let q_neg = &instances[j].anchor;
                    let with_pos = with_final(&inst.context, &inst.anchor);
                    let with_neg = with_final(&inst.context, q_neg);
                    let d = |r: &[TokenId]| -> Result<DeltaScore> {
                        let a = m.score(&with_pos, r)?.value();
                        let b = m.score(&with_neg, r)?.value();
                        DeltaScore::new(a - b)
                    };
                    let dp = d(&inst.positive)?;
                    let dn = d(&inst.negative)?;
                    Ok(WeightedInstance {
                        instance_index: i,
                        weight: weight_from_deltas(dp, dn, config.epsilon),
                        delta_pos: Some(dp.value()),
                        delta_neg: Some(dn.value()),
                    })
                })
                .collect()
        }
        Strategy::Wm | Strategy::Dual | Strategy::SingleTurnWm => {
            let m = require(models.utterance, Role::LastUtteranceSelection, s)?;
            delta_weights(m, instances, config.epsilon, config.seed, s == Strategy::SingleTurnWm)
        }
    }
}

/// Summary of a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub count: usize,
    pub mean: f64,
    pub fraction_zero: f64,
    pub fraction_one: f64,
}

pub fn weight_stats(weights: &[WeightedInstance]) -> WeightStats {
    let n = weights.len();
    if n == 0 {
        return WeightStats {
            count: 0,
            mean: 0.0,
            fraction_zero: 0.0,
            fraction_one: 0.0,
        };
    }
    let frac = |f: &dyn Fn(f64) -> bool| weights.iter().filter(|w| f(w.weight)).count() as f64 / n as f64;
    WeightStats {
        count: n,
        mean: weights.iter().map(|w| w.weight).sum::<f64>() / n as f64,
        fraction_zero: frac(&|w| w == 0.0),
        fraction_one: frac(&|w| w == 1.0),
    }
}

fn validate_weights(weights: &[WeightedInstance], origin: &str) -> Result<()> {
    for (i, w) in weights.iter().enumerate() {
        if w.instance_index != i {
            return Err(Error::Record {
                path: origin.to_string(),
                line: i + 1,
                message: format!("expected instance_index {i}, found {}", w.instance_index),
            });
        }
        if !(0.0..=1.0).contains(&w.weight) {
            return Err(Error::Record {
                path: origin.to_string(),
                line: i + 1,
                message: format!("weight {} outside [0,1]", w.weight),
            });
        }
    }
    Ok(())
}

pub fn weights_to_jsonl(weights: &[WeightedInstance]) -> Result<String> {
    to_jsonl(weights)
}

pub fn parse_weights(text: &str, origin: &str) -> Result<Vec<WeightedInstance>> {
    let w: Vec<WeightedInstance> = parse_jsonl(text, origin)?;
    validate_weights(&w, origin)?;
    Ok(w)
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightedInstance>> {
    let w: Vec<WeightedInstance> = read_jsonl(path)?;
    validate_weights(&w, &path.display().to_string())?;
    Ok(w)
}

/// Area under the ROC curve of `scores` for separating `positives` from the
/// rest, with ties counted as one half.
pub fn auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positives).filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positives).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut sorted = neg.clone();
    sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in &pos {
        let below = sorted.partition_point(|&n| n < p);
        let upto = sorted.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: f64) -> DeltaScore {
        DeltaScore::new(v).unwrap()
    }

    fn inst(anchor: u32, pos: Vec<u32>, neg: Vec<u32>) -> TrainingInstance {
        TrainingInstance {
            context: vec![vec![2, 3]],
            anchor: vec![anchor],
            positive: pos,
            negative: neg,
            noise_flag: None,
            source: 0,
        }
    }

    #[test]
    fn eq4_hand_values() {
        assert!((weight_from_deltas(d(0.6), d(0.2), 0.5) - 0.9).abs() < 1e-15);
        assert_eq!(weight_from_deltas(d(0.3), d(0.3), 0.0), 0.0);
        assert_eq!(weight_from_deltas(d(0.9), d(0.1), 0.5), 1.0);
    }

    #[test]
    fn delta_bounds() {
        assert!(DeltaScore::new(1.0).is_err());
        assert!(DeltaScore::new(-1.0).is_err());
        assert!(DeltaScore::new(0.6).is_ok());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn uniform_random_and_jaccard() {
        let insts: Vec<_> = (0..10).map(|i| inst(10 + i, vec![4, 5, 6], vec![5, 6, 7])).collect();
        let cfg = |strategy| WeightConfig {
            strategy,
            epsilon: 0.5,
            seed: 7,
        };
        let none = WeightModels::<f32>::default();
        let u = compute_weights(&cfg(Strategy::Uniform), &insts, none).unwrap();
        assert_eq!(u.len(), 10);
        assert!(u.iter().all(|w| w.weight == 1.0));
        let r1 = compute_weights(&cfg(Strategy::Random), &insts, none).unwrap();
        let r2 = compute_weights(&cfg(Strategy::Random), &insts, none).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.iter().all(|w| (0.0..=1.0).contains(&w.weight)));
        let j = compute_weights(&cfg(Strategy::Jaccard), &insts, none).unwrap();
        assert!(j.iter().all(|w| w.weight == 0.5));
    }

    #[test]
    fn model_strategies_require_models() {
        let insts: Vec<_> = (0..3).map(|i| inst(10 + i, vec![4], vec![5])).collect();
        for s in [Strategy::Wm, Strategy::Embedding, Strategy::ResponseModel, Strategy::SingleTurnWm, Strategy::Dual] {
            let cfg = WeightConfig {
                strategy: s,
                epsilon: 0.5,
                seed: 1,
            };
            assert!(compute_weights::<f32>(&cfg, &insts, WeightModels::default()).is_err());
        }
    }

    #[test]
    fn weights_file_round_trip() {
        let w = vec![
            WeightedInstance {
                instance_index: 0,
                weight: 0.25,
                delta_pos: Some(0.5),
                delta_neg: Some(-0.125),
            },
            WeightedInstance::plain(1, 1.0),
        ];
        let text = weights_to_jsonl(&w).unwrap();
        assert_eq!(parse_weights(&text, "w").unwrap(), w);
        assert!(!text.contains("null"));
        let bad = text.replace("\"instance_index\":1", "\"instance_index\":3");
        assert!(parse_weights(&bad, "w").is_err());
    }

    #[test]
    fn auc_reference_values() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]), Some(0.0));
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc(&[0.5], &[true]), None);
    }
}
