//! Synthetic dialogue corpora with planted false negatives.
//!
//! Every conversation belongs to an intent. Intents own disjoint content
//! vocabularies and share a small pool of function words. A context's true
//! response comes from its intent's response pool; a training negative is a
//! different response of the same intent with probability
//! `false_negative_rate` (a valid reply mislabeled as negative) and a
//! response of another intent otherwise. Test groups pair one same-intent
//! positive with nine cross-intent negatives, so they carry no label noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DialogueRecord, GroupRecord, GROUP_SIZE};
use crate::error::{Error, Result};

const FUNCTION_WORDS: [&str; 12] = [
    "the", "a", "i", "you", "it", "is", "to", "and", "so", "that", "we", "of",
];

/// Probability that a content word in an earlier context turn comes from the
/// conversation's own intent rather than a random one (topic drift).
const CONTEXT_COHERENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_intents: usize,
    pub responses_per_intent: usize,
    pub contexts_per_intent: usize,
    /// Context turns before the last utterance.
    pub turns_per_context: usize,
    pub false_negative_rate: f64,
    pub vocab_per_intent: usize,
    pub seed: u64,
    pub valid_contexts_per_intent: usize,
    pub test_groups_per_intent: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_intents: 20,
            responses_per_intent: 8,
            contexts_per_intent: 100,
            turns_per_context: 2,
            false_negative_rate: 0.3,
            vocab_per_intent: 12,
            seed: 0,
            valid_contexts_per_intent: 10,
            test_groups_per_intent: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.false_negative_rate;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "false_negative_rate must lie in [0,1], got {p}"
            )));
        }
        let counts = [
            ("num_intents", self.num_intents),
            ("responses_per_intent", self.responses_per_intent),
            ("contexts_per_intent", self.contexts_per_intent),
            ("turns_per_context", self.turns_per_context),
            ("vocab_per_intent", self.vocab_per_intent),
            ("valid_contexts_per_intent", self.valid_contexts_per_intent),
            ("test_groups_per_intent", self.test_groups_per_intent),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v < 1) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if p > 0.0 && self.responses_per_intent < 2 {
            return Err(Error::Config(
                "false negatives need at least two responses per intent".into(),
            ));
        }
        if self.num_intents < 2 {
            return Err(Error::Config(
                "cross-intent negatives need at least two intents".into(),
            ));
        }
        if (self.num_intents - 1) * self.responses_per_intent < GROUP_SIZE - 1 {
            return Err(Error::Config(format!(
                "test groups need {} distinct cross-intent responses; \
                 other intents hold only {}",
                GROUP_SIZE - 1,
                (self.num_intents - 1) * self.responses_per_intent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<DialogueRecord>,
    pub valid: Vec<DialogueRecord>,
    pub test: Vec<GroupRecord>,
}

struct Generator {
    rng: ChaCha8Rng,
    num_intents: usize,
    vocab_per_intent: usize,
}

impl Generator {
    fn content_word(&mut self, intent: usize) -> String {
        let j = self.rng.gen_range(0..self.vocab_per_intent);
        format!("i{intent}w{j}")
    }

    /// Two or three content words mixed with two or three function words.
    /// `coherence` is the chance each content word belongs to `intent`.
    fn utterance(&mut self, intent: usize, coherence: f64) -> String {
        let n_content = self.rng.gen_range(2..=3);
        let n_function = self.rng.gen_range(2..=3);
        let mut words = Vec::with_capacity(n_content + n_function);
        for _ in 0..n_content {
            let src = if self.rng.gen_bool(coherence) {
                intent
            } else {
                self.rng.gen_range(0..self.num_intents)
            };
            words.push(self.content_word(src));
        }
        for _ in 0..n_function {
            words.push(FUNCTION_WORDS[self.rng.gen_range(0..FUNCTION_WORDS.len())].to_string());
        }
        words.shuffle(&mut self.rng);
        words.join(" ")
    }

    fn other_intent(&mut self, intent: usize) -> usize {
        let j = self.rng.gen_range(0..self.num_intents - 1);
        if j >= intent {
            j + 1
        } else {
            j
        }
    }
}

/// Generates train/valid dialogue records and noise-free test groups.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        num_intents: spec.num_intents,
        vocab_per_intent: spec.vocab_per_intent,
    };

    let mut pools: Vec<Vec<String>> = Vec::with_capacity(spec.num_intents);
    for intent in 0..spec.num_intents {
        let mut pool: Vec<String> = Vec::with_capacity(spec.responses_per_intent);
        while pool.len() < spec.responses_per_intent {
            let r = g.utterance(intent, 1.0);
            if !pool.contains(&r) {
                pool.push(r);
            }
        }
        pools.push(pool);
    }

    let dialogues = |g: &mut Generator, per_intent: usize| -> Vec<DialogueRecord> {
        let mut out = Vec::with_capacity(spec.num_intents * per_intent * 2);
        let mut order: Vec<usize> = (0..spec.num_intents)
            .flat_map(|i| std::iter::repeat(i).take(per_intent))
            .collect();
        order.shuffle(&mut g.rng);
        for intent in order {
            let context: Vec<String> = (0..spec.turns_per_context)
                .map(|_| g.utterance(intent, CONTEXT_COHERENCE))
                .collect();
            let last = g.utterance(intent, 1.0);
            let pos_idx = g.rng.gen_range(0..spec.responses_per_intent);
            let response = pools[intent][pos_idx].clone();
            let planted = g.rng.gen_bool(spec.false_negative_rate);
            let negative = if planted {
                let mut j = g.rng.gen_range(0..spec.responses_per_intent - 1);
                if j >= pos_idx {
                    j += 1;
                }
                pools[intent][j].clone()
            } else {
                let other = g.other_intent(intent);
                let j = g.rng.gen_range(0..spec.responses_per_intent);
                pools[other][j].clone()
            };
            out.push(DialogueRecord {
                context: context.clone(),
                last_utterance: last.clone(),
                response,
                label: 1,
                noise_flag: None,
            });
            out.push(DialogueRecord {
                context,
                last_utterance: last,
                response: negative,
                label: 0,
                noise_flag: Some(planted),
            });
        }
        out
    };

    let train = dialogues(&mut g, spec.contexts_per_intent);
    let valid = dialogues(&mut g, spec.valid_contexts_per_intent);

    let mut test = Vec::with_capacity(spec.num_intents * spec.test_groups_per_intent);
    for _ in 0..spec.test_groups_per_intent {
        for intent in 0..spec.num_intents {
            let context: Vec<String> = (0..spec.turns_per_context)
                .map(|_| g.utterance(intent, CONTEXT_COHERENCE))
                .collect();
            let last = g.utterance(intent, 1.0);
            let mut cands = vec![(pools[intent].choose(&mut g.rng).unwrap().clone(), 1u8)];
            let mut others: Vec<usize> = (0..spec.num_intents).filter(|&i| i != intent).collect();
            others.shuffle(&mut g.rng);
            let mut k = 0;
            while cands.len() < GROUP_SIZE {
                let other = others[k % others.len()];
                let r = pools[other].choose(&mut g.rng).unwrap().clone();
                if !cands.iter().any(|(c, _)| *c == r) {
                    cands.push((r, 0));
                }
                k += 1;
            }
            cands.shuffle(&mut g.rng);
            test.push(GroupRecord {
                context,
                last_utterance: last,
                candidates: cands.iter().map(|(c, _)| c.clone()).collect(),
                labels: cands.iter().map(|(_, l)| *l).collect(),
            });
        }
    }

    Ok(SyntheticCorpus { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: f64) -> SynthSpec {
        SynthSpec {
            num_intents: 10,
            contexts_per_intent: 100,
            false_negative_rate: p,
            seed: 42,
            ..SynthSpec::default()
        }
    }

    fn flags(c: &SyntheticCorpus) -> Vec<bool> {
        c.train.iter().filter_map(|r| r.noise_flag).collect()
    }

    #[test]
    fn boundary_rates() {
        assert!(flags(&generate_synthetic(&spec(0.0)).unwrap()).iter().all(|f| !f));
        assert!(flags(&generate_synthetic(&spec(1.0)).unwrap()).iter().all(|f| *f));
    }

    #[test]
    fn planted_fraction_concentrates() {
        let f = flags(&generate_synthetic(&spec(0.3)).unwrap());
        assert_eq!(f.len(), 1000);
        let rate = f.iter().filter(|x| **x).count() as f64 / f.len() as f64;
        assert!((rate - 0.3).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn too_few_cross_intent_responses_is_rejected() {
        let s = SynthSpec {
            num_intents: 3,
            responses_per_intent: 3,
            ..spec(0.3)
        };
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn rate_outside_unit_interval_is_rejected() {
        assert!(generate_synthetic(&spec(1.5)).is_err());
        assert!(generate_synthetic(&spec(-0.1)).is_err());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(generate_synthetic(&spec(0.3)).unwrap(), generate_synthetic(&spec(0.3)).unwrap());
    }

    #[test]
    fn test_groups_have_one_positive() {
        let c = generate_synthetic(&spec(0.3)).unwrap();
        assert_eq!(c.test.len(), 100);
        for g in &c.test {
            assert_eq!(g.candidates.len(), GROUP_SIZE);
            assert_eq!(g.labels.iter().filter(|&&l| l == 1).count(), 1);
        }
    }

    #[test]
    fn planted_negatives_share_the_intent() {
        let c = generate_synthetic(&spec(0.5)).unwrap();
        let intent = |s: &str| -> Option<String> {
            s.split_whitespace()
                .find(|w| w.starts_with('i') && w.contains('w'))
                .map(|w| w.split('w').next().unwrap().to_string())
        };
        for pair in c.train.chunks(2) {
            let same = intent(&pair[0].response) == intent(&pair[1].response);
            assert_eq!(same, pair[1].noise_flag.unwrap());
            assert_ne!(pair[0].response, pair[1].response);
        }
    }
}
