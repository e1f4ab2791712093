mod common;

use iwrs_core::corpus::{generate_synthetic, SynthSpec};
use iwrs_core::matcher::{Architecture, Role};
use iwrs_core::objectives::MarginConfig;
use iwrs_core::training::{
    finetune_weighted_with, run_prepared, train_cross_entropy, FinetuneOptions, OptimConfig, PipelineConfig,
    PreparedData,
};
use iwrs_core::weighting::Strategy;
use iwrs_core::Error;

fn optim(epochs: usize, batch: usize) -> OptimConfig {
    OptimConfig {
        learning_rate: 1e-2,
        batch_size: batch,
        max_epochs: epochs,
        patience: epochs,
        ..OptimConfig::default()
    }
}

fn no_select(skip: bool) -> FinetuneOptions {
    FinetuneOptions {
        skip_zero_weights: skip,
        select_on_valid: false,
    }
}

#[test]
fn zero_weights_leave_parameters_bit_identical() {
    let model = common::tiny_model(Architecture::Recurrent, Role::ResponseSelection, 1);
    let insts = common::random_instances(20, 4);
    let w = vec![0.0; insts.len()];
    for skip in [true, false] {
        let (m, h) = finetune_weighted_with(
            model.clone(),
            &insts,
            &w,
            &[],
            MarginConfig { gamma: 0.0 },
            &optim(3, 5),
            no_select(skip),
        )
        .unwrap();
        assert_eq!(m.params(), model.params());
        assert_eq!(h.optimizer_steps, 12);
    }
}

#[test]
fn skipping_zero_weights_changes_nothing() {
    let model = common::tiny_model(Architecture::Attention, Role::ResponseSelection, 2);
    let insts = common::random_instances(40, 8);
    let w: Vec<f64> = (0..insts.len()).map(|i| if i % 3 == 0 { 0.0 } else { 0.3 + 0.01 * i as f64 }).collect();
    let run = |skip| {
        finetune_weighted_with(model.clone(), &insts, &w, &[], MarginConfig { gamma: 0.0 }, &optim(4, 8), no_select(skip))
            .unwrap()
            .0
    };
    let (a, b) = (run(true), run(false));
    assert_ne!(a.params(), model.params(), "fine-tuning should move the parameters");
    for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() <= 1e-6);
        }
    }
}

#[test]
fn cross_entropy_descends_and_is_reproducible() {
    let model = common::tiny_model(Architecture::Recurrent, Role::ResponseSelection, 3);
    let data = common::random_pointwise(50, 9);
    let cfg = optim(30, 10);
    let (_, h1) = train_cross_entropy(model.clone(), &data, &[], &cfg).unwrap();
    let (_, h2) = train_cross_entropy(model, &data, &[], &cfg).unwrap();
    assert!(h1.train_loss.last().unwrap() < &h1.train_loss[0]);
    assert_eq!(h1, h2);
    assert!(h1.max_clipped_norm <= cfg.grad_clip_norm + 1e-6);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let mut model = common::tiny_model(Architecture::Attention, Role::ResponseSelection, 3);
    model.params_mut().tensors_mut()[0].data.iter_mut().for_each(|v| *v = f64::NAN);
    let data = common::random_pointwise(10, 1);
    let err = train_cross_entropy(model, &data, &[], &optim(1, 5)).unwrap_err();
    assert!(matches!(err, Error::Training(_)));
    assert!(err.to_string().contains("batch 0"), "{err}");
}

fn tiny_pipeline(strategy: Strategy) -> (PipelineConfig, PreparedData) {
    let spec = SynthSpec {
        num_intents: 4,
        responses_per_intent: 3,
        contexts_per_intent: 6,
        valid_contexts_per_intent: 2,
        test_groups_per_intent: 2,
        vocab_per_intent: 4,
        seed: 5,
        ..SynthSpec::default()
    };
    let config = PipelineConfig {
        architecture: Architecture::Recurrent,
        hyper: common::tiny_hyper(),
        strategy,
        learning_rate: 1e-2,
        gamma: 0.0,
        epochs_pretrain: 2,
        epochs_finetune: 2,
        batch_size: 8,
        seed: 3,
        dual_rounds: 2,
        ..PipelineConfig::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let data = PreparedData::from_synthetic(&config, &corpus).unwrap();
    (config, data)
}

fn without_wall_time(json: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    v["meta"]["wall_time_secs"] = serde_json::Value::Null;
    v
}

#[test]
fn pipeline_is_deterministic_and_obstructs_the_complementary_model() {
    for strategy in [Strategy::Wm, Strategy::Dual, Strategy::SingleTurnWm] {
        let (config, data) = tiny_pipeline(strategy);
        let a = run_prepared(&config, data.clone()).unwrap();
        let b = run_prepared(&config, data).unwrap();
        assert_eq!(
            without_wall_time(&a.report.to_json().unwrap()),
            without_wall_time(&b.report.to_json().unwrap())
        );
        let sums = &a.report.complementary_checksum;
        if strategy == Strategy::Dual {
            assert_eq!(a.outcome.utterance_finetune_history.len(), 2);
        } else {
            assert_eq!(sums.before, sums.after);
            assert_eq!(sums.before, a.pretrained.model_utte_single.as_ref().unwrap_or(&a.pretrained.model_utte).checksum());
        }
        assert_eq!(a.report.seeds, config.seeds());
    }
}

#[test]
fn dual_with_one_round_and_no_second_half_matches_wm_with_one_epoch() {
    let (mut config, data) = tiny_pipeline(Strategy::Dual);
    config.dual_rounds = 1;
    config.dual_update_utterance = false;
    let dual = run_prepared(&config, data.clone()).unwrap();
    let wm_config = PipelineConfig {
        strategy: Strategy::Wm,
        epochs_finetune: 1,
        ..config.clone()
    };
    let wm = run_prepared(&wm_config, data).unwrap();
    assert_eq!(dual.outcome.model_final.params(), wm.outcome.model_final.params());
    let w = |o: &iwrs_core::training::PipelineOutput| o.outcome.weights.iter().map(|w| w.weight).collect::<Vec<_>>();
    assert_eq!(w(&dual), w(&wm));
}
