//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p iwrs-core --test acceptance`. The process exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use iwrs_core::corpus::generate_synthetic;
use iwrs_core::evaluation::{metrics_from_rankings, ranked_labels};
use iwrs_core::matcher::{Architecture, MatchProbability, Role};
use iwrs_core::objectives::{hinge, weighted_margin_batch, weighted_margin_loss, MarginConfig};
use iwrs_core::training::{
    finetune_strategy, finetune_weighted_with, parse_synth_spec, pretrain, run_pipeline_to_dir, CorpusPaths,
    FinetuneOptions, OptimConfig, PipelineConfig, PreparedData,
};
use iwrs_core::weighting::{weight_from_deltas, DeltaScore, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BENCHMARK: &str = include_str!("../../../configs/benchmark.txt");
const BENCHMARK_SYNTH: &str = include_str!("../../../configs/benchmark_synth.txt");
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(id: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} [{id}] {name}: {}", o.detail);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for arch in [Architecture::Recurrent, Architecture::Attention] {
        for loss in [common::Loss::CrossEntropy, common::Loss::Margin] {
            let r = common::fd_check(arch, loss);
            worst = worst.max(r.max_rel_err);
            parts.push(format!("{arch}/{loss:?} {} params max {:.2e}", r.checked, r.max_rel_err));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst < common::FD_TOLERANCE && secs < 60.0,
        detail: format!("{}; {secs:.1}s", parts.join(", ")),
    }
}

fn brute_force(labels: &[u8]) -> (f64, f64, f64) {
    let positives: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == 1).collect();
    let mut ap = 0.0;
    for &k in &positives {
        let above = labels[..=k].iter().filter(|&&l| l == 1).count();
        ap += above as f64 / (k + 1) as f64;
    }
    ap /= positives.len() as f64;
    let rr = 1.0 / (positives[0] + 1) as f64;
    let p1 = if labels[0] == 1 { 1.0 } else { 0.0 };
    (ap, rr, p1)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut lists = Vec::new();
    let mut mismatches = 0;
    while lists.len() < 100 {
        let n = rng.gen_range(1..=10);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        if !labels.contains(&1) {
            continue;
        }
        // Route through the score ranking so ties and ordering are exercised.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
        let ranked = ranked_labels(&scores, &labels);
        let one = metrics_from_rankings(std::slice::from_ref(&ranked)).unwrap();
        let (ap, rr, p1) = brute_force(&ranked);
        if (one.map, one.mrr, one.p_at_1) != (ap, rr, p1) {
            mismatches += 1;
        }
        lists.push(ranked);
    }
    let all = metrics_from_rankings(&lists).unwrap();
    let n = lists.len() as f64;
    let (mut ap, mut rr, mut p1) = (0.0, 0.0, 0.0);
    for l in &lists {
        let b = brute_force(l);
        ap += b.0;
        rr += b.1;
        p1 += b.2;
    }
    let mean_ok = (all.map, all.mrr, all.p_at_1) == (ap / n, rr / n, p1 / n);
    Outcome {
        pass: mismatches == 0 && mean_ok,
        detail: format!(
            "100 lists, {mismatches} per-list mismatches, means equal: {mean_ok} (MAP {:.4}, MRR {:.4}, P@1 {:.4})",
            all.map, all.mrr, all.p_at_1
        ),
    }
}

fn weight_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = |x: f64| DeltaScore::new(x).unwrap();
    let mut violations = BTreeMap::<&str, usize>::new();
    for _ in 0..10_000 {
        let (p, n) = (rng.gen_range(-0.99..0.99), rng.gen_range(-0.99..0.99));
        let eps = rng.gen_range(0.0..1.0);
        let step = rng.gen_range(0.0..0.5);
        let w = weight_from_deltas(d(p), d(n), eps);
        if !(0.0..=1.0).contains(&w) {
            *violations.entry("range").or_default() += 1;
        }
        let up = (p + step).min(0.999);
        if weight_from_deltas(d(up), d(n), eps) < w {
            *violations.entry("monotone in delta+").or_default() += 1;
        }
        let up_n = (n + step).min(0.999);
        if weight_from_deltas(d(p), d(up_n), eps) > w {
            *violations.entry("monotone in delta-").or_default() += 1;
        }
        // Shift both deltas by the same amount.
        let shift = rng.gen_range(-0.3..0.3);
        let (sp, sn) = (p + shift, n + shift);
        if sp.abs() < 1.0 && sn.abs() < 1.0 {
            let ws = weight_from_deltas(d(sp), d(sn), eps);
            if (ws - w).abs() > 1e-12 {
                *violations.entry("difference only").or_default() += 1;
            }
        }
    }
    let a = weight_from_deltas(d(0.6), d(0.2), 0.5);
    let b = weight_from_deltas(d(0.3), d(0.3), 0.0);
    let c = weight_from_deltas(d(0.9), d(0.1), 0.5);
    // 0.6 - 0.2 + 0.5 evaluates to the double just below 0.9.
    let hand = (a - 0.9).abs() <= 2.0 * f64::EPSILON && b == 0.0 && c == 1.0;
    Outcome {
        pass: violations.is_empty() && hand,
        detail: format!("10000 triples, violations {violations:?}; hand values {a:?} / {b:?} / {c:?}"),
    }
}

fn margin_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = MarginConfig::default();
    let p = |v: f64| MatchProbability::new(v).unwrap();
    let mut bad_sign = 0;
    let mut bad_zero = 0;
    for _ in 0..2000 {
        let n = rng.gen_range(1..8);
        let pairs: Vec<_> = (0..n).map(|_| (p(rng.gen_range(0.0..1.0)), p(rng.gen_range(0.0..1.0)))).collect();
        let w: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..=1.0) }).collect();
        let l = weighted_margin_loss(&pairs, &w, cfg).unwrap();
        if l < 0.0 {
            bad_sign += 1;
        }
        let silent = pairs
            .iter()
            .zip(&w)
            .all(|((pp, pn), &wi)| wi == 0.0 || hinge(pp.value(), pn.value(), cfg.gamma) == 0.0);
        if (l == 0.0) != silent {
            bad_zero += 1;
        }
    }

    // Weight linearity through the model.
    let model = common::tiny_model(Architecture::Attention, Role::ResponseSelection, 5);
    let insts = common::random_instances(40, 2);
    let zero_gamma = MarginConfig { gamma: 0.0 };
    let base: Vec<f64> = (0..insts.len()).map(|i| 0.2 + 0.02 * i as f64).collect();
    let batch = |scale: f64| {
        let b: Vec<_> = insts.iter().zip(&base).map(|(i, w)| (i, w * scale)).collect();
        weighted_margin_batch(&model, &b, zero_gamma, false).unwrap()
    };
    let (l1, g1) = batch(1.0);
    let mut lin_err: f64 = 0.0;
    for c in [0.5, 0.25, 0.1] {
        let (lc, gc) = batch(c);
        lin_err = lin_err.max((lc - c * l1).abs());
        for (a, b) in g1.flatten().iter().zip(gc.flatten()) {
            lin_err = lin_err.max((b - c * a).abs());
        }
    }

    // Skipping zero-weight instances during training.
    let w: Vec<f64> = (0..insts.len()).map(|i| if i % 3 == 0 { 0.0 } else { base[i] }).collect();
    let optim = OptimConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 5,
        patience: 5,
        ..OptimConfig::default()
    };
    let train = |skip| {
        let opts = FinetuneOptions {
            skip_zero_weights: skip,
            select_on_valid: false,
        };
        finetune_weighted_with(model.clone(), &insts, &w, &[], zero_gamma, &optim, opts).unwrap().0
    };
    let (a, b) = (train(true), train(false));
    let mut skip_diff: f64 = 0.0;
    for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
        for (u, v) in x.data.iter().zip(&y.data) {
            skip_diff = skip_diff.max((u - v).abs());
        }
    }
    let moved = a.params() != model.params();
    Outcome {
        pass: bad_sign == 0 && bad_zero == 0 && lin_err <= 1e-6 && skip_diff <= 1e-6 && moved,
        detail: format!(
            "2000 random batches: negative {bad_sign}, zero-iff violations {bad_zero}; \
             linearity max err {lin_err:.2e}; skip vs no-skip max param diff {skip_diff:.2e}"
        ),
    }
}

struct SeedRun {
    p_at_1: BTreeMap<Strategy, f64>,
    auc: Option<f64>,
    wm_secs: f64,
    checksums_equal: bool,
}

fn benchmark(p_fn: f64, seed: u64, strategies: &[Strategy]) -> SeedRun {
    let mut spec = parse_synth_spec(BENCHMARK_SYNTH).unwrap();
    spec.false_negative_rate = p_fn;
    spec.seed = seed;
    let mut config = PipelineConfig::parse(BENCHMARK).unwrap();
    config.seed = seed;
    let corpus = generate_synthetic(&spec).unwrap();
    let data = PreparedData::from_synthetic(&config, &corpus).unwrap();
    let start = Instant::now();
    let pre = pretrain(&config, &data, strategies).unwrap();
    let pretrain_secs = start.elapsed().as_secs_f64();
    let mut run = SeedRun {
        p_at_1: BTreeMap::new(),
        auc: None,
        wm_secs: 0.0,
        checksums_equal: true,
    };
    for &s in strategies {
        let t = Instant::now();
        let o = finetune_strategy(&config, &data, &pre, s).unwrap();
        run.p_at_1.insert(s, o.metrics_final.p_at_1);
        run.checksums_equal &= o.complementary_checksum_before == o.complementary_checksum_after
            && o.complementary_checksum_before == pre.model_utte.checksum();
        if s == Strategy::Wm {
            run.auc = o.noise.and_then(|n| n.auc);
            run.wm_secs = pretrain_secs + t.elapsed().as_secs_f64();
        }
    }
    println!(
        "  p_fn={p_fn} seed={seed}: pretrained P@1 {:.4}, final {}{}",
        pre.metrics_pretrained.p_at_1,
        run.p_at_1
            .iter()
            .map(|(s, v)| format!("{s} {v:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        run.auc.map_or(String::new(), |a| format!(", wm AUC {a:.4}"))
    );
    run
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = parse_synth_spec(
        "num_intents = 4\nresponses_per_intent = 3\ncontexts_per_intent = 10\nvalid_contexts_per_intent = 3\n\
         test_groups_per_intent = 2\nvocab_per_intent = 5\np_fn = 0.3\nseed = 6\n",
    )
    .unwrap();
    let corpus = generate_synthetic(&spec).unwrap();
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    iwrs_core::corpus::write_jsonl(&data_dir.join("train.jsonl"), &corpus.train).unwrap();
    iwrs_core::corpus::write_jsonl(&data_dir.join("valid.jsonl"), &corpus.valid).unwrap();
    iwrs_core::corpus::write_jsonl(&data_dir.join("test.jsonl"), &corpus.test).unwrap();
    let paths = CorpusPaths::in_dir(&data_dir);
    let mut differing = Vec::new();
    let mut compared = 0;
    for strategy in [Strategy::Wm, Strategy::Uniform, Strategy::Random, Strategy::Dual] {
        let mut config = PipelineConfig::parse(BENCHMARK).unwrap();
        config.hyper = common::tiny_hyper();
        config.epochs_pretrain = 2;
        config.epochs_finetune = 2;
        config.strategy = strategy;
        config.seed = 11;
        let a = dir.path().join(format!("{strategy}-a"));
        let b = dir.path().join(format!("{strategy}-b"));
        run_pipeline_to_dir(&config, &paths, &a).unwrap();
        run_pipeline_to_dir(&config, &paths, &b).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
            let same = if name == "report.json" {
                strip_wall_time(&x) == strip_wall_time(&y)
            } else {
                x == y
            };
            compared += 1;
            if !same {
                differing.push(format!("{strategy}/{}", name.to_string_lossy()));
            }
        }
    }
    Outcome {
        pass: differing.is_empty() && compared > 0,
        detail: format!("{compared} files compared across 4 strategies, differing: {differing:?}"),
    }
}

/// The report with `meta.wall_time_secs` blanked, as text.
fn strip_wall_time(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    text.lines()
        .map(|l| if l.trim_start().starts_with("\"wall_time_secs\"") { "\"wall_time_secs\": _" } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() {
    let mut failed = 0;
    let mut record = |id: usize, name: &str, o: Outcome| {
        line(id, name, &o);
        if !o.pass {
            failed += 1;
        }
    };
    record(1, "gradient check", gradient_check());
    record(2, "metric oracle", metric_oracle());
    record(3, "weight formula", weight_formula());
    record(4, "margin loss", margin_properties());

    println!("benchmark (p_fn = 0.3):");
    let noisy: Vec<SeedRun> = SEEDS
        .iter()
        .map(|&s| benchmark(0.3, s, &[Strategy::Uniform, Strategy::Wm, Strategy::Random]))
        .collect();
    println!("control (p_fn = 0):");
    let clean: Vec<SeedRun> = SEEDS.iter().map(|&s| benchmark(0.0, s, &[Strategy::Uniform, Strategy::Wm])).collect();

    let all_equal = noisy.iter().chain(&clean).all(|r| r.checksums_equal);
    record(
        5,
        "gradient obstruction",
        Outcome {
            pass: all_equal,
            detail: format!("complementary checksum unchanged in all {} fine-tuning runs: {all_equal}", 3 * 3 + 3 * 2),
        },
    );

    let aucs: Vec<f64> = noisy.iter().map(|r| r.auc.unwrap_or(f64::NAN)).collect();
    let auc = median(aucs.clone());
    let slowest = noisy.iter().map(|r| r.wm_secs).fold(0.0, f64::max);
    record(
        6,
        "noise detection",
        Outcome {
            pass: auc >= 0.65 && slowest < 600.0,
            detail: format!("AUC per seed {aucs:.4?}, median {auc:.4} (>= 0.65); slowest wm pipeline {slowest:.0}s"),
        },
    );

    let med = |runs: &[SeedRun], s: Strategy| median(runs.iter().map(|r| r.p_at_1[&s]).collect());
    let (wm, uniform, random) = (
        med(&noisy, Strategy::Wm),
        med(&noisy, Strategy::Uniform),
        med(&noisy, Strategy::Random),
    );
    record(
        7,
        "strategy ordering",
        Outcome {
            pass: wm >= uniform && uniform >= random && wm - uniform >= 0.02,
            detail: format!(
                "median P@1 wm {wm:.4}, uniform {uniform:.4}, random {random:.4}; wm - uniform {:+.4} (>= +0.02)",
                wm - uniform
            ),
        },
    );

    let (cw, cu) = (med(&clean, Strategy::Wm), med(&clean, Strategy::Uniform));
    record(
        8,
        "clean control",
        Outcome {
            pass: (cw - cu).abs() <= 0.05,
            detail: format!("median P@1 wm {cw:.4}, uniform {cu:.4}, |diff| {:.4} (<= 0.05)", (cw - cu).abs()),
        },
    );

    record(9, "determinism", determinism());

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
