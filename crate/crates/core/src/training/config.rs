//! Pipeline configuration and its flat `key = value` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimConfig;
use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::matcher::{Architecture, Hyper};
use crate::objectives::MarginConfig;
use crate::weighting::{Strategy, WeightConfig};

/// Offsets added to the base seed for each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSeeds {
    pub base: u64,
    pub utterance_init: u64,
    pub utterance_train: u64,
    pub response_init: u64,
    pub response_train: u64,
    pub negatives: u64,
    pub weights: u64,
    pub finetune: u64,
    pub complementary_data: u64,
    pub dual: u64,
}

impl PhaseSeeds {
    pub fn derive(base: u64) -> Self {
        let at = |k: u64| base.wrapping_add(k);
        Self {
            base,
            utterance_init: at(1),
            utterance_train: at(2),
            response_init: at(3),
            response_train: at(4),
            negatives: at(5),
            weights: at(6),
            finetune: at(7),
            complementary_data: at(8),
            dual: at(9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub architecture: Architecture,
    pub hyper: Hyper,
    pub min_freq: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub strategy: Strategy,
    pub learning_rate: f64,
    /// Fine-tuning learning rate; defaults to `learning_rate`.
    pub learning_rate_finetune: Option<f64>,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub patience: usize,
    pub seed: u64,
    pub dual_rounds: usize,
    /// In dual rounds, also fine-tune the last-utterance model.
    pub dual_update_utterance: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Attention,
            hyper: Hyper::default(),
            min_freq: 1,
            gamma: 0.25,
            epsilon: 0.5,
            strategy: Strategy::Wm,
            learning_rate: 1e-4,
            learning_rate_finetune: None,
            batch_size: 50,
            grad_clip_norm: 1.0,
            epochs_pretrain: 30,
            epochs_finetune: 20,
            patience: 5,
            seed: 0,
            dual_rounds: 1,
            dual_update_utterance: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper
            .validate(self.architecture)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.margin().validate()?;
        self.weight_config().validate()?;
        self.pretrain_optim(0).validate()?;
        self.finetune_optim().validate()?;
        if self.min_freq < 1 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if self.strategy == Strategy::Dual && self.dual_rounds < 1 {
            return Err(Error::Config("dual_rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> PhaseSeeds {
        PhaseSeeds::derive(self.seed)
    }

    pub fn margin(&self) -> MarginConfig {
        MarginConfig { gamma: self.gamma }
    }

    pub fn weight_config(&self) -> WeightConfig {
        WeightConfig {
            strategy: self.strategy,
            epsilon: self.epsilon,
            seed: self.seeds().weights,
        }
    }

    /// Cross-entropy settings with the given shuffling seed.
    pub fn pretrain_optim(&self, seed: u64) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            grad_clip_norm: self.grad_clip_norm,
            max_epochs: self.epochs_pretrain,
            patience: self.patience,
            seed,
        }
    }

    pub fn finetune_optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate_finetune.unwrap_or(self.learning_rate),
            max_epochs: self.epochs_finetune,
            seed: self.seeds().finetune,
            ..self.pretrain_optim(0)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value, line) in key_values(text)? {
            let bad = |what: &str| Error::Config(format!("line {line}: {key}: {what} {value:?}"));
            let int = || value.parse::<usize>().map_err(|_| bad("expected a count, got"));
            let real = || value.parse::<f64>().map_err(|_| bad("expected a number, got"));
            match key.as_str() {
                "architecture" => c.architecture = value.parse()?,
                "gamma" => c.gamma = real()?,
                "epsilon" => c.epsilon = real()?,
                "strategy" => c.strategy = value.parse()?,
                "lr" => c.learning_rate = real()?,
                "lr_finetune" => c.learning_rate_finetune = Some(real()?),
                "batch_size" => c.batch_size = int()?,
                "clip" => c.grad_clip_norm = real()?,
                "epochs_pretrain" => c.epochs_pretrain = int()?,
                "epochs_finetune" => c.epochs_finetune = int()?,
                "patience" => c.patience = int()?,
                "seed" => c.seed = value.parse().map_err(|_| bad("expected an integer, got"))?,
                "dual_rounds" => c.dual_rounds = int()?,
                "dual_update_utterance" => {
                    c.dual_update_utterance = value.parse().map_err(|_| bad("expected true/false, got"))?
                }
                "embed_dim" => c.hyper.embed_dim = int()?,
                "hidden_dim" => c.hyper.hidden_dim = int()?,
                "layers" => c.hyper.layers = int()?,
                "heads" => c.hyper.heads = int()?,
                "conv_channels" => c.hyper.conv_channels = int()?,
                "match_dim" => c.hyper.match_dim = int()?,
                "max_len" => c.hyper.max_len = int()?,
                "min_freq" => c.min_freq = int()?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// The configuration as `key = value` text that [`PipelineConfig::parse`]
    /// reads back unchanged.
    pub fn to_kv(&self) -> String {
        let h = &self.hyper;
        let mut lines = vec![
            format!("architecture = {}", self.architecture),
            format!("gamma = {}", self.gamma),
            format!("epsilon = {}", self.epsilon),
            format!("strategy = {}", self.strategy),
            format!("lr = {}", self.learning_rate),
        ];
        if let Some(lr) = self.learning_rate_finetune {
            lines.push(format!("lr_finetune = {lr}"));
        }
        lines.extend([
            format!("batch_size = {}", self.batch_size),
            format!("clip = {}", self.grad_clip_norm),
            format!("epochs_pretrain = {}", self.epochs_pretrain),
            format!("epochs_finetune = {}", self.epochs_finetune),
            format!("patience = {}", self.patience),
            format!("seed = {}", self.seed),
            format!("dual_rounds = {}", self.dual_rounds),
            format!("dual_update_utterance = {}", self.dual_update_utterance),
            format!("embed_dim = {}", h.embed_dim),
            format!("hidden_dim = {}", h.hidden_dim),
            format!("layers = {}", h.layers),
            format!("heads = {}", h.heads),
            format!("conv_channels = {}", h.conv_channels),
            format!("match_dim = {}", h.match_dim),
            format!("max_len = {}", h.max_len),
            format!("min_freq = {}", self.min_freq),
        ]);
        lines.join("\n") + "\n"
    }
}

fn key_values(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k, v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Reads a synthetic-corpus description in the same `key = value` format.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut s = SynthSpec::default();
    for (key, value, line) in key_values(text)? {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("line {line}: {key}: expected a count, got {value:?}")))
        };
        match key.as_str() {
            "num_intents" => s.num_intents = int()?,
            "responses_per_intent" => s.responses_per_intent = int()?,
            "contexts_per_intent" => s.contexts_per_intent = int()?,
            "turns_per_context" => s.turns_per_context = int()?,
            "vocab_per_intent" => s.vocab_per_intent = int()?,
            "valid_contexts_per_intent" => s.valid_contexts_per_intent = int()?,
            "test_groups_per_intent" => s.test_groups_per_intent = int()?,
            "false_negative_rate" | "p_fn" => {
                s.false_negative_rate = value
                    .parse()
                    .map_err(|_| Error::Config(format!("line {line}: {key}: expected a number, got {value:?}")))?
            }
            "seed" => {
                s.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("line {line}: seed: expected an integer, got {value:?}")))?
            }
            _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
        }
    }
    s.validate()?;
    Ok(s)
}
