//! Dialogue data model, JSONL ingestion, negative sampling and synthetic
//! corpora.

mod jsonl;
mod sampling;
mod synth;
mod vocab;

use std::collections::HashMap;
use std::path::Path;

pub use jsonl::{parse_jsonl, read_jsonl, to_jsonl, write_jsonl, DialogueRecord, GroupRecord};
pub use sampling::{build_pairwise, derive_last_utterance_data, sample_negatives};
pub(crate) use sampling::draw_other;
pub use synth::{generate_synthetic, SynthSpec, SyntheticCorpus};
pub use vocab::{build_vocab, tokenize, Vocab, PAD, UNK};

use crate::error::{Error, Result};
use crate::evaluation::EvalGroup;

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const MAX_UTTERANCE_TOKENS: usize = 50;
pub const MAX_CONTEXT_TURNS: usize = 5;
pub const GROUP_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Tokenization and shape limits applied while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub max_tokens: usize,
    /// Most recent context turns kept (excluding the last utterance).
    pub max_context_turns: usize,
    /// Allows records with an empty context.
    pub single_turn: bool,
    /// Exact candidate count required in test groups.
    pub group_size: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_tokens: MAX_UTTERANCE_TOKENS,
            max_context_turns: MAX_CONTEXT_TURNS,
            single_turn: false,
            group_size: GROUP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationText {
    pub context: Vec<String>,
    pub last_utterance: String,
    pub response: String,
}

/// A negative response shipped with the corpus rather than sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedNegative {
    pub tokens: TokenSeq,
    pub text: String,
    pub noise_flag: Option<bool>,
}

/// Turns `u1 .. u(n-1)`, last utterance `q = un` and the true response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub context: Vec<TokenSeq>,
    pub last_utterance: TokenSeq,
    pub response: TokenSeq,
    pub text: ConversationText,
    pub negatives: Vec<PlantedNegative>,
}

impl Conversation {
    /// Turns the response-selection matcher sees: context then last utterance.
    pub fn response_turns(&self) -> Vec<TokenSeq> {
        let mut t = self.context.clone();
        t.push(self.last_utterance.clone());
        t
    }
}

/// A single labeled (turns, candidate) example for cross-entropy training.
///
/// `turns` is the full matcher context; for response selection its last
/// element is the last utterance, for last-utterance selection it is the
/// response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointwiseExample {
    pub turns: Vec<TokenSeq>,
    pub candidate: TokenSeq,
    pub label: u8,
    pub noise_flag: Option<bool>,
    /// Index of the conversation the example was derived from.
    pub source: usize,
}

/// A positive and a negative candidate for one context.
///
/// `anchor` is the final matcher turn: the last utterance `q` for response
/// selection, the response `r` for the mirrored last-utterance task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub context: Vec<TokenSeq>,
    pub anchor: TokenSeq,
    pub positive: TokenSeq,
    pub negative: TokenSeq,
    /// True iff the negative is a planted false negative (synthetic corpora).
    pub noise_flag: Option<bool>,
    pub source: usize,
}

impl TrainingInstance {
    pub fn turns(&self) -> Vec<&[TokenId]> {
        self.context
            .iter()
            .map(|t| t.as_slice())
            .chain(std::iter::once(self.anchor.as_slice()))
            .collect()
    }
}

/// A loaded train or valid split.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSet {
    pub records: Vec<DialogueRecord>,
    pub conversations: Vec<Conversation>,
}

impl DialogueSet {
    pub fn has_planted_negatives(&self) -> bool {
        self.conversations.iter().any(|c| !c.negatives.is_empty())
    }

    /// Every positive and planted negative as a pointwise example, grouped by
    /// conversation.
    pub fn planted_pointwise(&self) -> Vec<PointwiseExample> {
        let mut out = Vec::new();
        for (i, c) in self.conversations.iter().enumerate() {
            let turns = c.response_turns();
            out.push(PointwiseExample {
                turns: turns.clone(),
                candidate: c.response.clone(),
                label: 1,
                noise_flag: None,
                source: i,
            });
            for n in &c.negatives {
                out.push(PointwiseExample {
                    turns: turns.clone(),
                    candidate: n.tokens.clone(),
                    label: 0,
                    noise_flag: n.noise_flag,
                    source: i,
                });
            }
        }
        out
    }

    /// Pointwise response-selection data: planted negatives when the file has
    /// them, otherwise `ratio` sampled negatives per conversation.
    pub fn response_examples(&self, seed: u64) -> Result<Vec<PointwiseExample>> {
        if self.has_planted_negatives() {
            Ok(self.planted_pointwise())
        } else {
            sample_negatives(&self.conversations, 1, seed)
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.records)
    }

    /// Every utterance text in the split, for vocabulary construction.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| {
            r.context
                .iter()
                .map(|s| s.as_str())
                .chain([r.last_utterance.as_str(), r.response.as_str()])
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedSplit {
    Dialogues(DialogueSet),
    Groups(Vec<EvalGroup>),
}

/// Loads a split from JSONL, tokenizing with `vocab`.
pub fn load_corpus(path: &Path, split: Split, vocab: &Vocab, opts: LoadOptions) -> Result<LoadedSplit> {
    match split {
        Split::Train | Split::Valid => load_dialogues(path, vocab, opts).map(LoadedSplit::Dialogues),
        Split::Test => load_groups(path, vocab, opts).map(LoadedSplit::Groups),
    }
}

pub fn load_dialogues(path: &Path, vocab: &Vocab, opts: LoadOptions) -> Result<DialogueSet> {
    let records = read_jsonl(path)?;
    dialogues_from_records(records, vocab, opts, &path.display().to_string())
}

pub fn load_groups(path: &Path, vocab: &Vocab, opts: LoadOptions) -> Result<Vec<EvalGroup>> {
    let records: Vec<GroupRecord> = read_jsonl(path)?;
    groups_from_records(&records, vocab, opts, &path.display().to_string())
}

struct Encoder<'a> {
    vocab: &'a Vocab,
    opts: LoadOptions,
    origin: &'a str,
}

impl Encoder<'_> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Record {
            path: self.origin.to_string(),
            line,
            message: message.into(),
        }
    }

    fn utterance(&self, text: &str, line: usize, what: &str) -> Result<TokenSeq> {
        let toks = self.vocab.encode(text, self.opts.max_tokens);
        if toks.is_empty() {
            return Err(self.err(line, format!("empty {what}")));
        }
        Ok(toks)
    }

    fn context(&self, turns: &[String], line: usize) -> Result<Vec<TokenSeq>> {
        if turns.is_empty() && !self.opts.single_turn {
            return Err(self.err(line, "empty context (single-turn mode is off)"));
        }
        let skip = turns.len().saturating_sub(self.opts.max_context_turns);
        turns[skip..]
            .iter()
            .map(|t| self.utterance(t, line, "context turn"))
            .collect()
    }
}

/// Tokenizes train/valid records. Label-0 records attach to the closest
/// preceding label-1 record with the same context and last utterance.
pub fn dialogues_from_records(
    records: Vec<DialogueRecord>,
    vocab: &Vocab,
    opts: LoadOptions,
    origin: &str,
) -> Result<DialogueSet> {
    let enc = Encoder {
        vocab,
        opts,
        origin,
    };
    let mut conversations: Vec<Conversation> = Vec::new();
    let mut by_key: HashMap<(Vec<String>, String), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        let context = enc.context(&r.context, line)?;
        let last = enc.utterance(&r.last_utterance, line, "last utterance")?;
        let response = enc.utterance(&r.response, line, "response")?;
        let key = (r.context.clone(), r.last_utterance.clone());
        match r.label {
            1 => {
                if r.noise_flag.is_some() {
                    return Err(enc.err(line, "noise_flag is only meaningful on negatives"));
                }
                by_key.insert(key, conversations.len());
                conversations.push(Conversation {
                    context,
                    last_utterance: last,
                    response,
                    text: ConversationText {
                        context: r.context.clone(),
                        last_utterance: r.last_utterance.clone(),
                        response: r.response.clone(),
                    },
                    negatives: Vec::new(),
                });
            }
            0 => {
                let Some(&owner) = by_key.get(&key) else {
                    return Err(enc.err(line, "negative record without a preceding positive"));
                };
                conversations[owner].negatives.push(PlantedNegative {
                    tokens: response,
                    text: r.response.clone(),
                    noise_flag: r.noise_flag,
                });
            }
            other => return Err(enc.err(line, format!("label must be 0 or 1, got {other}"))),
        }
    }
    Ok(DialogueSet {
        records,
        conversations,
    })
}

/// Tokenizes test groups. Groups without any positive label are dropped.
pub fn groups_from_records(
    records: &[GroupRecord],
    vocab: &Vocab,
    opts: LoadOptions,
    origin: &str,
) -> Result<Vec<EvalGroup>> {
    let enc = Encoder {
        vocab,
        opts,
        origin,
    };
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.candidates.len() != opts.group_size {
            return Err(enc.err(
                line,
                format!(
                    "expected {} candidates, found {}",
                    opts.group_size,
                    r.candidates.len()
                ),
            ));
        }
        if r.labels.len() != r.candidates.len() {
            return Err(enc.err(line, "labels and candidates differ in length"));
        }
        if r.labels.iter().any(|&l| l > 1) {
            return Err(enc.err(line, "labels must be 0 or 1"));
        }
        let context = enc.context(&r.context, line)?;
        let last = enc.utterance(&r.last_utterance, line, "last utterance")?;
        let candidates = r
            .candidates
            .iter()
            .map(|c| enc.utterance(c, line, "candidate"))
            .collect::<Result<Vec<_>>>()?;
        if !r.labels.contains(&1) {
            continue;
        }
        out.push(EvalGroup {
            context,
            last_utterance: last,
            candidates,
            labels: r.labels.clone(),
        });
    }
    Ok(out)
}
