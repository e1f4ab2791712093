//! End-to-end procedure: complementary model, response pretraining,
//! instance weights, weighted fine-tuning and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PhaseSeeds, PipelineConfig};
use super::loops::{finetune_weighted, groups_from_pointwise, train_cross_entropy, History};
use super::optim::OptimConfig;
use crate::corpus::{
    build_pairwise, build_vocab, derive_last_utterance_data, dialogues_from_records, groups_from_records,
    read_jsonl, DialogueRecord, DialogueSet, GroupRecord, LoadOptions, PointwiseExample, SyntheticCorpus,
    TrainingInstance, Vocab,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalGroup, Metrics};
use crate::matcher::{Matcher, Role};
use crate::weighting::{
    auc, compute_weights, mirrored_weights, weight_stats, weights_to_jsonl, Strategy, WeightConfig,
    WeightModels, WeightStats, WeightedInstance,
};

/// Train, validation and test files of one corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

impl CorpusPaths {
    /// `train.jsonl`, `valid.jsonl` and `test.jsonl` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            valid: dir.join("valid.jsonl"),
            test: dir.join("test.jsonl"),
        }
    }
}

/// Loaded corpus with every derived dataset the pipeline needs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: DialogueSet,
    pub valid: DialogueSet,
    pub test: Vec<EvalGroup>,
    /// Response-selection examples (one positive and one negative each).
    pub train_examples: Vec<PointwiseExample>,
    pub valid_examples: Vec<PointwiseExample>,
    pub instances: Vec<TrainingInstance>,
    pub valid_groups: Vec<EvalGroup>,
    /// Last-utterance selection examples.
    pub utterance_train: Vec<PointwiseExample>,
    pub utterance_valid: Vec<PointwiseExample>,
}

impl PreparedData {
    pub fn load(config: &PipelineConfig, paths: &CorpusPaths) -> Result<Self> {
        let train: Vec<DialogueRecord> = read_jsonl(&paths.train)?;
        let valid: Vec<DialogueRecord> = read_jsonl(&paths.valid)?;
        let test: Vec<GroupRecord> = read_jsonl(&paths.test)?;
        let origins = [&paths.train, &paths.valid, &paths.test].map(|p| p.display().to_string());
        Self::from_records(config, train, valid, &test, &origins)
    }

    pub fn from_synthetic(config: &PipelineConfig, corpus: &SyntheticCorpus) -> Result<Self> {
        let origins = ["train".to_string(), "valid".to_string(), "test".to_string()];
        Self::from_records(config, corpus.train.clone(), corpus.valid.clone(), &corpus.test, &origins)
    }

    fn from_records(
        config: &PipelineConfig,
        train: Vec<DialogueRecord>,
        valid: Vec<DialogueRecord>,
        test: &[GroupRecord],
        origins: &[String; 3],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data(format!("{}: no training records", origins[0])));
        }
        if test.is_empty() {
            return Err(Error::Data(format!("{}: no test groups", origins[2])));
        }
        let texts = train.iter().flat_map(|r| {
            r.context
                .iter()
                .map(|s| s.as_str())
                .chain([r.last_utterance.as_str(), r.response.as_str()])
        });
        let vocab = build_vocab(texts, config.min_freq)?;
        let opts = LoadOptions::default();
        let train = dialogues_from_records(train, &vocab, opts, &origins[0])?;
        let valid = dialogues_from_records(valid, &vocab, opts, &origins[1])?;
        let test = groups_from_records(test, &vocab, opts, &origins[2])?;
        if test.is_empty() {
            return Err(Error::Data(format!("{}: no test group has a positive", origins[2])));
        }
        let seeds = config.seeds();
        let train_examples = train.response_examples(seeds.negatives)?;
        let valid_examples = if valid.conversations.len() >= 2 || valid.has_planted_negatives() {
            valid.response_examples(seeds.negatives)?
        } else {
            Vec::new()
        };
        let instances = build_pairwise(&train_examples)?;
        let valid_groups = groups_from_pointwise(&valid_examples);
        let utterance_train = derive_last_utterance_data(&train.conversations, seeds.complementary_data, false)?;
        let utterance_valid = if valid.conversations.len() >= 2 {
            derive_last_utterance_data(&valid.conversations, seeds.complementary_data, false)?
        } else {
            Vec::new()
        };
        Ok(Self {
            vocab,
            train,
            valid,
            test,
            train_examples,
            valid_examples,
            instances,
            valid_groups,
            utterance_train,
            utterance_valid,
        })
    }

    pub fn noise_flags(&self) -> Option<Vec<bool>> {
        self.instances.iter().map(|i| i.noise_flag).collect()
    }
}

/// Models and records from the cross-entropy phases.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model_utte: Matcher,
    pub utterance_history: History,
    /// Last-utterance model that sees only the response, for `single_turn_wm`.
    pub model_utte_single: Option<Matcher>,
    pub utterance_single_history: Option<History>,
    pub model_res: Matcher,
    pub pretrain_history: History,
    pub metrics_pretrained: Metrics,
}

/// Trains a last-utterance model; with `single_turn` it sees the response
/// without the earlier context.
pub fn train_utterance_model(
    config: &PipelineConfig,
    data: &PreparedData,
    single_turn: bool,
) -> Result<(Matcher, History)> {
    let seeds = config.seeds();
    let model = Matcher::new(
        config.architecture,
        Role::LastUtteranceSelection,
        config.hyper,
        data.vocab.len(),
        seeds.utterance_init,
    )?;
    let optim = config.pretrain_optim(seeds.utterance_train);
    if single_turn {
        let train = derive_last_utterance_data(&data.train.conversations, seeds.complementary_data, true)?;
        let valid = if data.valid.conversations.len() >= 2 {
            derive_last_utterance_data(&data.valid.conversations, seeds.complementary_data, true)?
        } else {
            Vec::new()
        };
        train_cross_entropy(model, &train, &valid, &optim)
    } else {
        train_cross_entropy(model, &data.utterance_train, &data.utterance_valid, &optim)
    }
}

/// Trains the complementary model(s) and pretrains the response model.
pub fn pretrain(config: &PipelineConfig, data: &PreparedData, strategies: &[Strategy]) -> Result<Pretrained> {
    config.validate()?;
    let seeds = config.seeds();
    let (model_utte, utterance_history) = train_utterance_model(config, data, false)?;
    let (model_utte_single, utterance_single_history) = if strategies.contains(&Strategy::SingleTurnWm) {
        let (m, h) = train_utterance_model(config, data, true)?;
        (Some(m), Some(h))
    } else {
        (None, None)
    };
    let model = Matcher::new(
        config.architecture,
        Role::ResponseSelection,
        config.hyper,
        data.vocab.len(),
        seeds.response_init,
    )?;
    let optim = config.pretrain_optim(seeds.response_train);
    let (model_res, pretrain_history) = train_cross_entropy(model, &data.train_examples, &data.valid_examples, &optim)?;
    let metrics_pretrained = evaluate(&model_res, &data.test)?;
    Ok(Pretrained {
        model_utte,
        utterance_history,
        model_utte_single,
        utterance_single_history,
        model_res,
        pretrain_history,
        metrics_pretrained,
    })
}

/// How well weights separate planted false negatives from true negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub planted: usize,
    pub clean: usize,
    pub mean_weight_planted: f64,
    pub mean_weight_clean: f64,
    /// Probability that a true negative outweighs a planted false negative.
    pub auc: Option<f64>,
}

pub fn noise_stats(weights: &[WeightedInstance], flags: &[bool]) -> NoiseStats {
    let mean = |want: bool| {
        let v: Vec<f64> = weights.iter().zip(flags).filter(|(_, &f)| f == want).map(|(w, _)| w.weight).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let w: Vec<f64> = weights.iter().map(|w| w.weight).collect();
    let clean: Vec<bool> = flags.iter().map(|f| !f).collect();
    NoiseStats {
        planted: flags.iter().filter(|f| **f).count(),
        clean: clean.iter().filter(|f| **f).count(),
        mean_weight_planted: mean(true),
        mean_weight_clean: mean(false),
        auc: auc(&w, &clean),
    }
}

/// Everything produced by weighting and fine-tuning one strategy.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub weights: Vec<WeightedInstance>,
    pub model_final: Matcher,
    /// Final last-utterance model; differs from the pretrained one only
    /// under the dual schedule.
    pub model_utte_final: Matcher,
    pub finetune_history: Vec<History>,
    pub utterance_finetune_history: Vec<History>,
    pub metrics_final: Metrics,
    pub weight_stats: WeightStats,
    pub noise: Option<NoiseStats>,
    pub complementary_checksum_before: String,
    pub complementary_checksum_after: String,
}

fn one_epoch(optim: &OptimConfig, seed: u64) -> OptimConfig {
    OptimConfig {
        max_epochs: 1,
        seed,
        ..*optim
    }
}

const ROUND_STRIDE: u64 = 1000;

/// Computes weights with `strategy` and fine-tunes a copy of the pretrained
/// response model. The complementary models are only read.
pub fn finetune_strategy(
    config: &PipelineConfig,
    data: &PreparedData,
    pre: &Pretrained,
    strategy: Strategy,
) -> Result<StrategyOutcome> {
    let config = PipelineConfig {
        strategy,
        ..config.clone()
    };
    config.validate()?;
    let seeds = config.seeds();
    let optim = config.finetune_optim();
    let margin = config.margin();
    let utte = match strategy {
        Strategy::SingleTurnWm => pre
            .model_utte_single
            .as_ref()
            .ok_or_else(|| Error::Model("single-turn last-utterance model was not trained".into()))?,
        _ => &pre.model_utte,
    };
    let checksum_before = utte.checksum();

    let (weights, model_final, model_utte_final, ft_hist, utte_hist) = if strategy == Strategy::Dual {
        run_dual_rounds(&config, data, pre, &seeds)?
    } else {
        let models = WeightModels {
            utterance: Some(utte),
            response: Some(&pre.model_res),
        };
        let weights = compute_weights(&config.weight_config(), &data.instances, models)?;
        let w: Vec<f64> = weights.iter().map(|w| w.weight).collect();
        let (m, h) = finetune_weighted(pre.model_res.clone(), &data.instances, &w, &data.valid_groups, margin, &optim)?;
        (weights, m, utte.clone(), vec![h], Vec::new())
    };

    let checksum_after = if strategy == Strategy::Dual {
        model_utte_final.checksum()
    } else {
        utte.checksum()
    };
    let metrics_final = evaluate(&model_final, &data.test)?;
    let noise = data.noise_flags().map(|f| noise_stats(&weights, &f));
    Ok(StrategyOutcome {
        strategy,
        weight_stats: weight_stats(&weights),
        weights,
        model_final,
        model_utte_final,
        finetune_history: ft_hist,
        utterance_finetune_history: utte_hist,
        metrics_final,
        noise,
        complementary_checksum_before: checksum_before,
        complementary_checksum_after: checksum_after,
    })
}

type DualResult = (Vec<WeightedInstance>, Matcher, Matcher, Vec<History>, Vec<History>);

/// Alternating schedule: each round weights the response task with the
/// last-utterance model and fine-tunes the response model for one epoch,
/// then weights the last-utterance task with the response model and
/// fine-tunes the last-utterance model for one epoch.
fn run_dual_rounds(
    config: &PipelineConfig,
    data: &PreparedData,
    pre: &Pretrained,
    seeds: &PhaseSeeds,
) -> Result<DualResult> {
    let optim = config.finetune_optim();
    let margin = config.margin();
    let utte_instances = build_pairwise(&data.utterance_train)?;
    let utte_valid = groups_from_pointwise(&data.utterance_valid);
    let mut res = pre.model_res.clone();
    let mut utte = pre.model_utte.clone();
    let mut weights = Vec::new();
    let (mut res_hist, mut utte_hist) = (Vec::new(), Vec::new());
    for round in 0..config.dual_rounds as u64 {
        let shift = round * ROUND_STRIDE;
        let wc = WeightConfig {
            strategy: Strategy::Dual,
            epsilon: config.epsilon,
            seed: seeds.weights.wrapping_add(shift),
        };
        let models = WeightModels {
            utterance: Some(&utte),
            response: None,
        };
        weights = compute_weights(&wc, &data.instances, models)?;
        let w: Vec<f64> = weights.iter().map(|w| w.weight).collect();
        let ft = one_epoch(&optim, seeds.finetune.wrapping_add(shift));
        let (m, h) = finetune_weighted(res, &data.instances, &w, &data.valid_groups, margin, &ft)?;
        res = m;
        res_hist.push(h);
        if config.dual_update_utterance {
            let uw = mirrored_weights(&res, &utte_instances, config.epsilon, seeds.dual.wrapping_add(shift))?;
            let uw: Vec<f64> = uw.iter().map(|w| w.weight).collect();
            let ft = one_epoch(&optim, seeds.dual.wrapping_add(shift + 1));
            let (m, h) = finetune_weighted(utte, &utte_instances, &uw, &utte_valid, margin, &ft)?;
            utte = m;
            utte_hist.push(h);
        }
    }
    Ok((weights, res, utte, res_hist, utte_hist))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_conversations: usize,
    pub train_instances: usize,
    pub valid_groups: usize,
    pub test_groups: usize,
    pub vocab_size: usize,
    pub vocab_checksum: String,
    pub planted_negatives: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histories {
    pub utterance: History,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utterance_single_turn: Option<History>,
    pub pretrain: History,
    pub finetune: Vec<History>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub utterance_finetune: Vec<History>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksumPair {
    pub before: String,
    pub after: String,
}

/// Run metadata that legitimately differs between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: PipelineConfig,
    pub seeds: PhaseSeeds,
    pub strategy: Strategy,
    pub data: DataSummary,
    pub histories: Histories,
    pub weight_stats: WeightStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseStats>,
    pub metrics_pretrained: Metrics,
    pub metrics_final: Metrics,
    pub complementary_checksum: ChecksumPair,
    pub meta: RunMeta,
}

impl Report {
    pub fn build(
        config: &PipelineConfig,
        data: &PreparedData,
        pre: &Pretrained,
        outcome: &StrategyOutcome,
        wall_time_secs: f64,
    ) -> Self {
        let config = PipelineConfig {
            strategy: outcome.strategy,
            ..config.clone()
        };
        Self {
            seeds: config.seeds(),
            strategy: outcome.strategy,
            data: DataSummary {
                train_conversations: data.train.conversations.len(),
                train_instances: data.instances.len(),
                valid_groups: data.valid_groups.len(),
                test_groups: data.test.len(),
                vocab_size: data.vocab.len(),
                vocab_checksum: data.vocab.checksum(),
                planted_negatives: data.train.has_planted_negatives(),
            },
            histories: Histories {
                utterance: pre.utterance_history.clone(),
                utterance_single_turn: match outcome.strategy {
                    Strategy::SingleTurnWm => pre.utterance_single_history.clone(),
                    _ => None,
                },
                pretrain: pre.pretrain_history.clone(),
                finetune: outcome.finetune_history.clone(),
                utterance_finetune: outcome.utterance_finetune_history.clone(),
            },
            weight_stats: outcome.weight_stats,
            noise: outcome.noise,
            metrics_pretrained: pre.metrics_pretrained,
            metrics_final: outcome.metrics_final,
            complementary_checksum: ChecksumPair {
                before: outcome.complementary_checksum_before.clone(),
                after: outcome.complementary_checksum_after.clone(),
            },
            meta: RunMeta { wall_time_secs },
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub data: PreparedData,
    pub pretrained: Pretrained,
    pub outcome: StrategyOutcome,
    pub report: Report,
}

/// Loads the corpus and runs every phase for the configured strategy.
pub fn run_pipeline(config: &PipelineConfig, paths: &CorpusPaths) -> Result<PipelineOutput> {
    config.validate()?;
    let data = PreparedData::load(config, paths)?;
    run_prepared(config, data)
}

/// [`run_pipeline`] for the dual strategy.
pub fn run_dual(config: &PipelineConfig, paths: &CorpusPaths) -> Result<PipelineOutput> {
    if config.strategy != Strategy::Dual {
        return Err(Error::Config("run_dual needs strategy = dual".into()));
    }
    run_pipeline(config, paths)
}

pub fn run_prepared(config: &PipelineConfig, data: PreparedData) -> Result<PipelineOutput> {
    let start = Instant::now();
    let pretrained = pretrain(config, &data, &[config.strategy])?;
    let outcome = finetune_strategy(config, &data, &pretrained, config.strategy)?;
    let report = Report::build(config, &data, &pretrained, &outcome, start.elapsed().as_secs_f64());
    Ok(PipelineOutput {
        data,
        pretrained,
        outcome,
        report,
    })
}

/// One pipeline per strategy, all sharing the same pretrained models.
pub fn compare_strategies(
    config: &PipelineConfig,
    data: &PreparedData,
    strategies: &[Strategy],
) -> Result<(Pretrained, Vec<(StrategyOutcome, Report)>)> {
    let start = Instant::now();
    let pre = pretrain(config, data, strategies)?;
    let pretrain_secs = start.elapsed().as_secs_f64();
    let mut rows = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let t = Instant::now();
        let outcome = finetune_strategy(config, data, &pre, s)?;
        let report = Report::build(config, data, &pre, &outcome, pretrain_secs + t.elapsed().as_secs_f64());
        rows.push((outcome, report));
    }
    Ok((pre, rows))
}

/// Aligned text table with 4-decimal metrics.
pub fn comparison_table(rows: &[(Strategy, Metrics)]) -> String {
    let width = rows.iter().map(|(s, _)| s.name().len()).max().unwrap_or(0).max("strategy".len());
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}\n", "strategy", "MAP", "MRR", "P@1");
    for (s, m) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}\n",
            s.name(),
            m.map,
            m.mrr,
            m.p_at_1
        ));
    }
    out
}

/// Name of the marker file recording the last completed phase.
pub const PHASE_MARKER: &str = "PHASE";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the pipeline and writes its artifacts into `out`: `vocab.txt`,
/// checkpoints, `weights.jsonl` and `report.json`. `PHASE` names the last
/// completed phase so that partial runs remain inspectable.
pub fn run_pipeline_to_dir(config: &PipelineConfig, paths: &CorpusPaths, out: &Path) -> Result<Report> {
    let start = Instant::now();
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(PHASE_MARKER);
    write(&marker, "started\n")?;
    let data = PreparedData::load(config, paths)?;
    let vocab_sum = data.vocab.checksum();
    data.vocab.save(&out.join("vocab.txt"))?;
    write(&out.join("config.txt"), &config.to_kv())?;
    write(&marker, "data\n")?;

    let pre = pretrain(config, &data, &[config.strategy])?;
    pre.model_utte.save(&out.join("model_utte.json"), &vocab_sum)?;
    if let Some(m) = &pre.model_utte_single {
        m.save(&out.join("model_utte_single.json"), &vocab_sum)?;
    }
    pre.model_res.save(&out.join("model_res_pretrained.json"), &vocab_sum)?;
    write(&marker, "pretrain\n")?;

    let outcome = finetune_strategy(config, &data, &pre, config.strategy)?;
    write(&out.join("weights.jsonl"), &weights_to_jsonl(&outcome.weights)?)?;
    outcome.model_final.save(&out.join("model_res_final.json"), &vocab_sum)?;
    if config.strategy == Strategy::Dual {
        outcome.model_utte_final.save(&out.join("model_utte_final.json"), &vocab_sum)?;
    }
    write(&marker, "finetune\n")?;

    let report = Report::build(config, &data, &pre, &outcome, start.elapsed().as_secs_f64());
    write(&out.join("report.json"), &report.to_json()?)?;
    write(&marker, "done\n")?;
    Ok(report)
}
