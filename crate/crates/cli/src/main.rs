use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use iwrs_core::corpus::{generate_synthetic, write_jsonl, SynthSpec, TokenId, Vocab};
use iwrs_core::evaluation::evaluate;
use iwrs_core::matcher::{Matcher, Role};
use iwrs_core::training::{
    compare_strategies, comparison_table, finetune_weighted, parse_synth_spec, run_pipeline_to_dir,
    train_cross_entropy, train_utterance_model, CorpusPaths, PipelineConfig, PreparedData,
};
use iwrs_core::weighting::{compute_weights, read_weights, weights_to_jsonl, Strategy, WeightModels, WeightedInstance};
use iwrs_core::{Error, Result};

#[derive(Parser)]
#[command(name = "iwrs", version, about = "Instance-weighted response selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted false negatives.
    Synth(Common),
    /// Train the last-utterance selection model.
    TrainComplementary(Common),
    /// Pretrain the response selection model with cross-entropy.
    Pretrain(Common),
    /// Compute instance weights from trained models.
    Weigh(Common),
    /// Fine-tune the pretrained response model with the weighted margin loss.
    Finetune(Common),
    /// Evaluate the fine-tuned (or pretrained) response model on the test split.
    Evaluate(Common),
    /// Run every phase and write report.json.
    Pipeline(Common),
    /// Run several strategies on shared pretrained models.
    Compare(Common),
    /// Show the lowest- and highest-weight training instances.
    InspectWeights(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weighting strategy, or a comma-separated list for `compare`.
    #[arg(long)]
    strategy: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Instances per bucket for `inspect-weights`.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = &self.strategy {
            let list = strategies(s)?;
            c.strategy = list[0];
        }
        c.validate()?;
        Ok(c)
    }

    fn data(&self) -> Result<CorpusPaths> {
        let dir = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("--data is required".into()))?;
        Ok(CorpusPaths::in_dir(dir))
    }

    fn out(&self) -> Result<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| Error::Config("--out is required".into()))?;
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        Ok(out)
    }
}

fn strategies(list: &str) -> Result<Vec<Strategy>> {
    let v = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Strategy>>>()?;
    if v.is_empty() {
        return Err(Error::Config("no strategy given".into()));
    }
    Ok(v)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn cmd_synth(args: &Common) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            parse_synth_spec(&text)?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic(&spec)?;
    let out = args.out()?;
    write_jsonl(&out.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&out.join("valid.jsonl"), &corpus.valid)?;
    write_jsonl(&out.join("test.jsonl"), &corpus.test)?;
    let planted = corpus.train.iter().filter(|r| r.noise_flag == Some(true)).count();
    println!(
        "wrote {} train records ({} planted false negatives), {} valid records, {} test groups to {}",
        corpus.train.len(),
        planted,
        corpus.valid.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// Loads data and writes the vocabulary next to the checkpoints.
fn prepare(args: &Common) -> Result<(PipelineConfig, PreparedData, PathBuf, String)> {
    let config = args.config()?;
    let data = PreparedData::load(&config, &args.data()?)?;
    let out = args.out()?;
    data.vocab.save(&out.join("vocab.txt"))?;
    let sum = data.vocab.checksum();
    Ok((config, data, out, sum))
}

fn load_model(out: &Path, name: &str, vocab_sum: &str) -> Result<Matcher> {
    let path = out.join(name);
    if !path.exists() {
        return Err(Error::Data(format!("{} not found; run the earlier phase first", path.display())));
    }
    Matcher::load(&path, vocab_sum)
}

fn cmd_train_complementary(args: &Common) -> Result<()> {
    let (config, data, out, sum) = prepare(args)?;
    let (model, history) = train_utterance_model(&config, &data, false)?;
    model.save(&out.join("model_utte.json"), &sum)?;
    write_json(&out.join("history_utte.json"), &serde_json::to_value(&history)?)?;
    println!("last-utterance model: best epoch {}, checksum {}", history.best_epoch, model.checksum());
    if config.strategy == Strategy::SingleTurnWm {
        let (model, history) = train_utterance_model(&config, &data, true)?;
        model.save(&out.join("model_utte_single.json"), &sum)?;
        write_json(&out.join("history_utte_single.json"), &serde_json::to_value(&history)?)?;
        println!("single-turn model: best epoch {}, checksum {}", history.best_epoch, model.checksum());
    }
    Ok(())
}

fn cmd_pretrain(args: &Common) -> Result<()> {
    let (config, data, out, sum) = prepare(args)?;
    let seeds = config.seeds();
    let model: Matcher = Matcher::new(
        config.architecture,
        Role::ResponseSelection,
        config.hyper,
        data.vocab.len(),
        seeds.response_init,
    )?;
    let (model, history) = train_cross_entropy(
        model,
        &data.train_examples,
        &data.valid_examples,
        &config.pretrain_optim(seeds.response_train),
    )?;
    model.save(&out.join("model_res_pretrained.json"), &sum)?;
    write_json(&out.join("history_pretrain.json"), &serde_json::to_value(&history)?)?;
    println!("response model: best epoch {}, checksum {}", history.best_epoch, model.checksum());
    Ok(())
}

fn cmd_weigh(args: &Common) -> Result<()> {
    let (config, data, out, sum) = prepare(args)?;
    let s = config.strategy;
    let utte = if s.needs_utterance_model() {
        let name = if s == Strategy::SingleTurnWm { "model_utte_single.json" } else { "model_utte.json" };
        Some(load_model(&out, name, &sum)?)
    } else {
        None
    };
    let res = if s.needs_response_model() {
        Some(load_model(&out, "model_res_pretrained.json", &sum)?)
    } else {
        None
    };
    let models = WeightModels {
        utterance: utte.as_ref(),
        response: res.as_ref(),
    };
    let weights = compute_weights(&config.weight_config(), &data.instances, models)?;
    write(&out.join("weights.jsonl"), &weights_to_jsonl(&weights)?)?;
    let stats = iwrs_core::weighting::weight_stats(&weights);
    println!(
        "{} weights: mean {:.4}, zero {:.4}, one {:.4}",
        weights.len(),
        stats.mean,
        stats.fraction_zero,
        stats.fraction_one
    );
    Ok(())
}

fn read_aligned_weights(out: &Path, n: usize) -> Result<Vec<WeightedInstance>> {
    let weights = read_weights(&out.join("weights.jsonl"))?;
    if weights.len() != n {
        return Err(Error::Data(format!(
            "weights file has {} entries but the corpus has {} training instances",
            weights.len(),
            n
        )));
    }
    Ok(weights)
}

fn cmd_finetune(args: &Common) -> Result<()> {
    let (config, data, out, sum) = prepare(args)?;
    let model = load_model(&out, "model_res_pretrained.json", &sum)?;
    let weights = read_aligned_weights(&out, data.instances.len())?;
    let w: Vec<f64> = weights.iter().map(|w| w.weight).collect();
    let (model, history) = finetune_weighted(
        model,
        &data.instances,
        &w,
        &data.valid_groups,
        config.margin(),
        &config.finetune_optim(),
    )?;
    model.save(&out.join("model_res_final.json"), &sum)?;
    write_json(&out.join("history_finetune.json"), &serde_json::to_value(&history)?)?;
    println!("fine-tuned: best epoch {}, checksum {}", history.best_epoch, model.checksum());
    Ok(())
}

fn cmd_evaluate(args: &Common) -> Result<()> {
    let (_, data, out, sum) = prepare(args)?;
    let name = if out.join("model_res_final.json").exists() {
        "model_res_final.json"
    } else {
        "model_res_pretrained.json"
    };
    let model = load_model(&out, name, &sum)?;
    let m = evaluate(&model, &data.test)?;
    write_json(&out.join("metrics.json"), &json!({ "model": name, "metrics": m }))?;
    println!("{name}: MAP {:.4}  MRR {:.4}  P@1 {:.4}  ({} groups)", m.map, m.mrr, m.p_at_1, m.num_groups);
    Ok(())
}

fn cmd_pipeline(args: &Common) -> Result<()> {
    let config = args.config()?;
    let paths = args.data()?;
    let out = args.out()?;
    let report = run_pipeline_to_dir(&config, &paths, &out)?;
    let (a, b) = (report.metrics_pretrained, report.metrics_final);
    println!("strategy {}", report.strategy);
    println!("pretrained  MAP {:.4}  MRR {:.4}  P@1 {:.4}", a.map, a.mrr, a.p_at_1);
    println!("final       MAP {:.4}  MRR {:.4}  P@1 {:.4}", b.map, b.mrr, b.p_at_1);
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn cmd_compare(args: &Common) -> Result<()> {
    let start = Instant::now();
    let config = args.config()?;
    let list = match &args.strategy {
        Some(s) => strategies(s)?,
        None => vec![Strategy::Uniform, Strategy::Wm],
    };
    let data = PreparedData::load(&config, &args.data()?)?;
    let out = args.out()?;
    let (_, rows) = compare_strategies(&config, &data, &list)?;
    let mut table_rows = Vec::new();
    let mut json_rows = Vec::new();
    for (outcome, report) in &rows {
        let dir = out.join(outcome.strategy.name());
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write(&dir.join("report.json"), &report.to_json()?)?;
        write(&dir.join("weights.jsonl"), &weights_to_jsonl(&outcome.weights)?)?;
        table_rows.push((outcome.strategy, outcome.metrics_final));
        json_rows.push(json!({
            "strategy": outcome.strategy,
            "metrics": outcome.metrics_final,
            "weight_stats": outcome.weight_stats,
            "noise": outcome.noise,
        }));
    }
    let table = comparison_table(&table_rows);
    let pretrained = rows.first().map(|(_, r)| r.metrics_pretrained);
    write(&out.join("compare.txt"), &table)?;
    write_json(
        &out.join("compare.json"),
        &json!({
            "config": config,
            "seeds": config.seeds(),
            "metrics_pretrained": pretrained,
            "rows": json_rows,
            "meta": { "wall_time_secs": start.elapsed().as_secs_f64() },
        }),
    )?;
    print!("{table}");
    Ok(())
}

fn decode(vocab: &Vocab, tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_inspect_weights(args: &Common) -> Result<()> {
    let config = args.config()?;
    let data = PreparedData::load(&config, &args.data()?)?;
    let out = args
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    let weights = read_aligned_weights(&out, data.instances.len())?;
    let n = weights.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[a].weight.total_cmp(&weights[b].weight).then(a.cmp(&b)));
    let low_n = args.k.min(n);
    let high_n = args.k.min(n - low_n);
    let lowest: Vec<usize> = order[..low_n].to_vec();
    let highest: Vec<usize> = order[low_n..].iter().rev().take(high_n).copied().collect();

    let flags: Vec<Option<bool>> = data.instances.iter().map(|i| i.noise_flag).collect();
    let rate = |idx: &[usize]| -> Option<f64> {
        let known: Vec<bool> = idx.iter().filter_map(|&i| flags[i]).collect();
        if known.is_empty() {
            None
        } else {
            Some(known.iter().filter(|f| **f).count() as f64 / known.len() as f64)
        }
    };
    let all: Vec<usize> = (0..n).collect();
    let show = |title: &str, idx: &[usize]| {
        println!("== {title} ({} instances) ==", idx.len());
        for &i in idx {
            let inst = &data.instances[i];
            let w = &weights[i];
            let conv = &data.train.conversations[inst.source];
            let fmt_delta = |d: Option<f64>| d.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "#{i}  weight {:.4}  delta+ {}  delta- {}{}",
                w.weight,
                fmt_delta(w.delta_pos),
                fmt_delta(w.delta_neg),
                match inst.noise_flag {
                    Some(f) => format!("  noise_flag {f}"),
                    None => String::new(),
                }
            );
            for (k, t) in conv.text.context.iter().enumerate() {
                println!("  context[{k}]: {t}");
            }
            println!("  last:     {}", conv.text.last_utterance);
            println!("  positive: {}", conv.text.response);
            let negative = conv
                .negatives
                .iter()
                .find(|nn| nn.tokens == inst.negative)
                .map(|nn| nn.text.clone())
                .unwrap_or_else(|| decode(&data.vocab, &inst.negative));
            println!("  negative: {negative}");
        }
        println!();
    };
    show("lowest weights", &lowest);
    show("highest weights", &highest);
    if let (Some(base), Some(low)) = (rate(&all), rate(&lowest)) {
        println!("planted false-negative rate: corpus {base:.4}, lowest bucket {low:.4}");
        if let Some(high) = rate(&highest) {
            println!("planted false-negative rate: highest bucket {high:.4}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::TrainComplementary(a) => cmd_train_complementary(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Weigh(a) => cmd_weigh(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::InspectWeights(a) => cmd_inspect_weights(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
