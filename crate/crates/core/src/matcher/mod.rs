//! Matching models mapping (context turns, candidate) to Pr(y=1 | candidate, context).
//!
//! One architecture family serves both roles: response selection scores a
//! response against (context, last utterance); last-utterance selection
//! scores a last utterance against (context, response). Only the data
//! arrangement differs between the roles.

mod attention;
pub mod checkpoint;
pub mod graph;
pub mod params;
mod recurrent;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use graph::{Graph, Var};
use params::{ParamSet, Real};

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};

/// Range of the uniform initializer for weight tensors.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Sequential matching: GRU encoders, similarity matrices, CNN, turn-level GRU.
    Recurrent,
    /// Deep attention matching: stacked self-attention, cross-attention, CNN.
    Attention,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" | "smn" => Ok(Self::Recurrent),
            "attention" | "dam" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Recurrent => "recurrent",
            Self::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ResponseSelection,
    LastUtteranceSelection,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ResponseSelection => "response_selection",
            Self::LastUtteranceSelection => "last_utterance_selection",
        })
    }
}

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Self-attention layers (attention architecture).
    pub layers: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    pub conv_channels: usize,
    /// Width of per-turn matching vectors (recurrent architecture).
    pub match_dim: usize,
    /// Side of the fixed similarity matrices (recurrent architecture);
    /// longer utterances are truncated.
    pub max_len: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
            layers: 2,
            heads: 2,
            conv_channels: 8,
            match_dim: 32,
            max_len: 50,
        }
    }
}

impl Hyper {
    pub fn validate(&self, arch: Architecture) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("conv_channels", self.conv_channels),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Model(format!("{name} must be positive")));
        }
        match arch {
            Architecture::Attention => {
                if self.layers == 0 || self.heads == 0 {
                    return Err(Error::Model("layers and heads must be positive".into()));
                }
                if self.embed_dim % self.heads != 0 {
                    return Err(Error::Model(format!(
                        "heads ({}) must divide embed_dim ({})",
                        self.heads, self.embed_dim
                    )));
                }
            }
            Architecture::Recurrent => {
                if self.match_dim == 0 {
                    return Err(Error::Model("match_dim must be positive".into()));
                }
                if self.max_len < 2 {
                    return Err(Error::Model("max_len must be at least 2".into()));
                }
            }
        }
        Ok(())
    }
}

/// A probability strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MatchProbability(f64);

impl MatchProbability {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Data(format!("probability {value} is not inside (0,1)")))
        }
    }

    /// Sigmoid of a logit, nudged off the boundary when it rounds to 0 or 1.
    pub fn from_logit(logit: f64) -> Self {
        let p = if logit >= 0.0 {
            1.0 / (1.0 + (-logit).exp())
        } else {
            let e = logit.exp();
            e / (1.0 + e)
        };
        Self(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Recurrent(recurrent::Ids),
    Attention(attention::Ids),
}

/// A parameterized matcher for one role.
#[derive(Debug, Clone, PartialEq)]
pub struct Matcher<F: Real = f32> {
    architecture: Architecture,
    role: Role,
    hyper: Hyper,
    vocab_size: usize,
    seed: u64,
    params: ParamSet<F>,
    layout: Layout,
}

impl<F: Real> Matcher<F> {
    /// Weights drawn from a seeded uniform(-0.1, 0.1); biases start at zero.
    pub fn new(
        architecture: Architecture,
        role: Role,
        hyper: Hyper,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate(architecture)?;
        if vocab_size < 3 {
            return Err(Error::Model("vocabulary must hold at least one real token".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = match architecture {
            Architecture::Recurrent => {
                Layout::Recurrent(recurrent::Ids::register(&mut params, &hyper, vocab_size, &mut rng))
            }
            Architecture::Attention => {
                Layout::Attention(attention::Ids::register(&mut params, &hyper, vocab_size, &mut rng))
            }
        };
        Ok(Self {
            architecture,
            role,
            hyper,
            vocab_size,
            seed,
            params,
            layout,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    /// Mutable parameter access for optimizers.
    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Matcher<G> {
        Matcher {
            architecture: self.architecture,
            role: self.role,
            hyper: self.hyper,
            vocab_size: self.vocab_size,
            seed: self.seed,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Same computation graph and parameters under the other role.
    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub(crate) fn replace_params(&mut self, params: ParamSet<F>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Model("parameter count mismatch".into()));
        }
        for (a, b) in self.params.tensors().iter().zip(params.tensors()) {
            if a.name != b.name || a.shape != b.shape || b.data.len() != a.data.len() {
                return Err(Error::Model(format!(
                    "parameter {} does not match the architecture",
                    b.name
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Strips padding, drops empty turns and checks token ranges.
    fn prepare<'a>(
        &self,
        turns: &[&'a [TokenId]],
        candidate: &'a [TokenId],
    ) -> Result<(Vec<Vec<TokenId>>, Vec<TokenId>)> {
        let clean = |seq: &[TokenId]| -> Result<Vec<TokenId>> {
            let mut out = Vec::with_capacity(seq.len());
            for &t in seq {
                if t as usize >= self.vocab_size {
                    return Err(Error::Data(format!(
                        "token id {t} outside vocabulary of size {}",
                        self.vocab_size
                    )));
                }
                if t != PAD {
                    out.push(t);
                }
            }
            if self.architecture == Architecture::Recurrent {
                out.truncate(self.hyper.max_len);
            }
            Ok(out)
        };
        let mut ts = Vec::with_capacity(turns.len());
        for t in turns {
            let c = clean(t)?;
            if !c.is_empty() {
                ts.push(c);
            }
        }
        if ts.is_empty() {
            return Err(Error::Data("at least one non-empty context turn is required".into()));
        }
        let cand = clean(candidate)?;
        if cand.is_empty() {
            return Err(Error::Data("candidate is empty".into()));
        }
        Ok((ts, cand))
    }

    /// Records the matching logit for (turns, candidate) on `g`.
    pub fn logit(
        &self,
        g: &mut Graph<'_, F>,
        turns: &[&[TokenId]],
        candidate: &[TokenId],
    ) -> Result<Var> {
        let (turns, cand) = self.prepare(turns, candidate)?;
        Ok(match &self.layout {
            Layout::Recurrent(ids) => ids.logit(g, &self.hyper, &turns, &cand),
            Layout::Attention(ids) => ids.logit(g, &self.hyper, &turns, &cand),
        })
    }

    pub fn score(&self, turns: &[&[TokenId]], candidate: &[TokenId]) -> Result<MatchProbability> {
        let mut g = Graph::new(&self.params);
        let v = self.logit(&mut g, turns, candidate)?;
        Ok(MatchProbability::from_logit(g.value(v)[0].as_f64()))
    }

    /// Scores every item independently; padding never leaks across items.
    pub fn score_batch<T: AsRef<[TokenId]>>(
        &self,
        items: &[(Vec<T>, T)],
    ) -> Result<Vec<MatchProbability>> {
        items
            .iter()
            .map(|(turns, cand)| {
                let t: Vec<&[TokenId]> = turns.iter().map(|x| x.as_ref()).collect();
                self.score(&t, cand.as_ref())
            })
            .collect()
    }

    /// Mean of the final-layer hidden states of an utterance's tokens.
    pub fn represent(&self, utterance: &[TokenId]) -> Result<Vec<f64>> {
        let (_, cand) = self.prepare(&[utterance], utterance)?;
        let mut g = Graph::new(&self.params);
        let states = match &self.layout {
            Layout::Recurrent(ids) => ids.encode(&mut g, &cand),
            Layout::Attention(ids) => *ids.encode(&mut g, &cand).last().expect("layers >= 1"),
        };
        let mean = g.mean_rows(states);
        Ok(g.value(mean).iter().map(|v| v.as_f64()).collect())
    }
}

/// Seeded RNG for parameter initialization, exposed for tests that need
/// a reproducible perturbation stream.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture) -> Matcher<f32> {
        let hyper = Hyper {
            embed_dim: 8,
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            conv_channels: 4,
            match_dim: 6,
            max_len: 6,
        };
        Matcher::new(arch, Role::ResponseSelection, hyper, 30, 3).unwrap()
    }

    const ARCHS: [Architecture; 2] = [Architecture::Recurrent, Architecture::Attention];

    #[test]
    fn same_seed_same_parameters() {
        for arch in ARCHS {
            let a = tiny(arch);
            let b = tiny(arch);
            assert_eq!(a.checksum(), b.checksum());
            let c = Matcher::<f32>::new(arch, Role::ResponseSelection, *a.hyper(), 30, 4).unwrap();
            assert_ne!(a.checksum(), c.checksum());
        }
    }

    #[test]
    fn biases_start_at_zero() {
        for arch in ARCHS {
            let m = tiny(arch);
            for t in m.params().tensors() {
                let leaf = t.name.rsplit('.').next().unwrap();
                if leaf == "bias" || leaf.starts_with("b_") {
                    assert!(t.data.iter().all(|v| *v == 0.0), "{}", t.name);
                } else {
                    assert!(t.data.iter().all(|v| v.abs() < 0.1), "{}", t.name);
                }
            }
        }
    }

    #[test]
    fn head_divisibility() {
        let ok = Hyper {
            embed_dim: 64,
            heads: 2,
            ..Hyper::default()
        };
        assert!(ok.validate(Architecture::Attention).is_ok());
        let bad = Hyper {
            embed_dim: 63,
            heads: 2,
            ..Hyper::default()
        };
        assert!(bad.validate(Architecture::Attention).is_err());
        assert!(Matcher::<f32>::new(Architecture::Attention, Role::ResponseSelection, bad, 30, 1).is_err());
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        for arch in ARCHS {
            let m = tiny(arch);
            let turns: [&[TokenId]; 2] = [&[2, 3, 4], &[5, 6]];
            let p = m.score(&turns, &[7, 8, 9]).unwrap();
            assert!(p.value() > 0.01 && p.value() < 0.99);
            assert_eq!(p, m.score(&turns, &[7, 8, 9]).unwrap());
        }
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        for arch in ARCHS {
            let m = tiny(arch);
            let turns: [&[TokenId]; 1] = [&[2, 3]];
            assert!(m.score(&turns, &[30]).is_err());
            assert!(m.score(&turns, &[]).is_err());
            let empty: [&[TokenId]; 1] = [&[0, 0]];
            assert!(m.score(&empty, &[4]).is_err());
        }
    }

    #[test]
    fn padding_does_not_change_scores() {
        for arch in ARCHS {
            let m = tiny(arch);
            let turns: [&[TokenId]; 2] = [&[2, 3, 4], &[5, 6]];
            let base = m.score(&turns, &[7, 8]).unwrap().value();
            let padded: [&[TokenId]; 3] = [&[0, 0], &[2, 3, 4, 0, 0], &[5, 6, 0]];
            let p = m.score(&padded, &[7, 8, 0, 0, 0]).unwrap().value();
            assert!((base - p).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_matches_individual_scores() {
        for arch in ARCHS {
            let m = tiny(arch);
            let items: Vec<(Vec<Vec<TokenId>>, Vec<TokenId>)> = vec![
                (vec![vec![2, 3]], vec![4]),
                (vec![vec![5, 6, 7, 8, 9], vec![10]], vec![11, 12, 13]),
                (vec![vec![14], vec![15, 16], vec![17, 18, 19]], vec![20, 21]),
            ];
            let batch = m.score_batch(&items).unwrap();
            for ((turns, cand), b) in items.iter().zip(&batch) {
                let t: Vec<&[TokenId]> = turns.iter().map(|x| x.as_slice()).collect();
                let single = m.score(&t, cand).unwrap();
                assert!((single.value() - b.value()).abs() < 1e-6);
            }
            let empty: Vec<(Vec<Vec<TokenId>>, Vec<TokenId>)> = Vec::new();
            assert!(m.score_batch(&empty).unwrap().is_empty());
        }
    }

    #[test]
    fn representation_has_hidden_width() {
        let m = tiny(Architecture::Recurrent);
        assert_eq!(m.represent(&[2, 3, 4]).unwrap().len(), 8);
        let m = tiny(Architecture::Attention);
        assert_eq!(m.represent(&[2, 3, 4]).unwrap().len(), 8);
    }

    #[test]
    fn probability_bounds() {
        assert!(MatchProbability::new(0.0).is_err());
        assert!(MatchProbability::new(1.0).is_err());
        assert!(MatchProbability::from_logit(800.0).value() < 1.0);
        assert!(MatchProbability::from_logit(-800.0).value() > 0.0);
    }
}
