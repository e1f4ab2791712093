//! Optimization: cross-entropy pretraining, weighted margin fine-tuning and
//! the end-to-end pipeline.

mod config;
mod loops;
mod optim;
mod pipeline;

pub use config::{parse_synth_spec, PhaseSeeds, PipelineConfig};
pub use loops::{
    finetune_weighted, finetune_weighted_with, groups_from_pointwise, train_cross_entropy, FinetuneOptions,
    History,
};
pub use optim::{clip_gradients, Adam, OptimConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use pipeline::{
    compare_strategies, comparison_table, finetune_strategy, noise_stats, pretrain, run_dual, run_pipeline,
    run_pipeline_to_dir, run_prepared, train_utterance_model, ChecksumPair, CorpusPaths, DataSummary, Histories, NoiseStats,
    PipelineOutput, PreparedData, Pretrained, Report, RunMeta, StrategyOutcome, PHASE_MARKER,
};
