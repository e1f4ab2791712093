use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_gradients, Adam, OptimConfig};
use crate::corpus::{PointwiseExample, TrainingInstance};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalGroup};
use crate::matcher::params::{Gradients, ParamSet, Real};
use crate::matcher::{Matcher, Role};
use crate::objectives::{cross_entropy_batch, cross_entropy_value, weighted_margin_batch, MarginConfig};

/// Per-epoch record of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// `valid_loss` (lower is better) or `valid_p_at_1` (higher is better).
    pub selection_metric: String,
    /// Mean per-instance training loss, accumulated during each epoch.
    pub train_loss: Vec<f64>,
    /// Validation metric before training (index 0) and after every epoch.
    pub valid_metric: Vec<f64>,
    /// Epoch whose parameters were kept; 0 means the starting point.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub optimizer_steps: usize,
    /// Largest global gradient norm after clipping.
    pub max_clipped_norm: f64,
}

impl History {
    fn new(metric: &str) -> Self {
        Self {
            selection_metric: metric.to_string(),
            train_loss: Vec::new(),
            valid_metric: Vec::new(),
            best_epoch: 0,
            stopped_early: false,
            optimizer_steps: 0,
            max_clipped_norm: 0.0,
        }
    }
}

/// Tracks the best snapshot and the patience counter.
struct Selector<F: Real> {
    higher_is_better: bool,
    best: f64,
    best_params: ParamSet<F>,
    since_best: usize,
}

impl<F: Real> Selector<F> {
    fn new(higher_is_better: bool, initial: f64, model: &Matcher<F>) -> Self {
        Self {
            higher_is_better,
            best: initial,
            best_params: model.params().clone(),
            since_best: 0,
        }
    }

    /// Returns true if `value` improved on the best so far.
    fn offer(&mut self, value: f64, model: &Matcher<F>) -> bool {
        let better = if self.higher_is_better {
            value > self.best
        } else {
            value < self.best
        };
        if better {
            self.best = value;
            self.best_params = model.params().clone();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }
}

fn check_finite(loss: f64, grads: &Gradients<impl Real>, epoch: usize, batch: usize) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss or gradient at epoch {epoch}, batch {batch} (loss = {loss})"
        )));
    }
    Ok(())
}

fn step<F: Real>(
    model: &mut Matcher<F>,
    adam: &mut Adam,
    mut grads: Gradients<F>,
    clip: f64,
    history: &mut History,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    clip_gradients(&mut grads, clip);
    history.max_clipped_norm = history.max_clipped_norm.max(grads.global_norm());
    adam.step(model.params_mut(), &grads);
    history.optimizer_steps += 1;
    if !model.params().all_finite() {
        return Err(Error::Training(format!(
            "parameters became non-finite at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(())
}

fn mean_ce<F: Real>(model: &Matcher<F>, data: &[PointwiseExample]) -> Result<f64> {
    let refs: Vec<&PointwiseExample> = data.iter().collect();
    Ok(cross_entropy_value(model, &refs)? / data.len().max(1) as f64)
}

/// Mini-batch Adam on summed cross-entropy with seeded shuffling and
/// global-norm clipping. Keeps the parameters with the lowest validation
/// loss (training loss when `valid` is empty).
pub fn train_cross_entropy<F: Real>(
    mut model: Matcher<F>,
    train: &[PointwiseExample],
    valid: &[PointwiseExample],
    optim: &OptimConfig,
) -> Result<(Matcher<F>, History)> {
    optim.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let mut history = History::new("valid_loss");
    let monitor = if valid.is_empty() { train } else { valid };
    let initial = mean_ce(&model, monitor)?;
    history.valid_metric.push(initial);
    let mut sel = Selector::new(false, initial, &model);
    let mut adam = Adam::new(model.params(), optim.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=optim.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(optim.batch_size).enumerate() {
            let batch: Vec<&PointwiseExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = cross_entropy_batch(&model, &batch)?;
            check_finite(loss, &grads, epoch, b)?;
            total += loss;
            step(&mut model, &mut adam, grads, optim.grad_clip_norm, &mut history, epoch, b)?;
        }
        history.train_loss.push(total / train.len() as f64);
        let v = mean_ce(&model, monitor)?;
        if !v.is_finite() {
            return Err(Error::Training(format!("validation loss is not finite after epoch {epoch}")));
        }
        history.valid_metric.push(v);
        if sel.offer(v, &model) {
            history.best_epoch = epoch;
        } else if sel.since_best >= optim.patience {
            history.stopped_early = true;
            break;
        }
    }
    model.replace_params(sel.best_params)?;
    Ok((model, history))
}

/// Validation groups from pointwise data: one group per source context with
/// its positive and negative candidates.
pub fn groups_from_pointwise(examples: &[PointwiseExample]) -> Vec<EvalGroup> {
    let mut out: Vec<EvalGroup> = Vec::new();
    let mut index: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for ex in examples {
        let slot = *index.entry(ex.source).or_insert_with(|| {
            let (last, context) = ex.turns.split_last().expect("examples carry a turn");
            out.push(EvalGroup {
                context: context.to_vec(),
                last_utterance: last.clone(),
                candidates: Vec::new(),
                labels: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].candidates.push(ex.candidate.clone());
        out[slot].labels.push(ex.label);
    }
    out.retain(|g| g.labels.contains(&1));
    out
}

fn valid_p_at_1<F: Real>(model: &Matcher<F>, groups: &[EvalGroup]) -> Result<f64> {
    if model.role() == Role::ResponseSelection {
        return Ok(evaluate(model, groups)?.p_at_1);
    }
    // Ranking code is role-checked; the graph is identical under either role.
    let m = model.clone().with_role(Role::ResponseSelection);
    Ok(evaluate(&m, groups)?.p_at_1)
}

/// Fine-tuning options beyond the optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinetuneOptions {
    /// Skip zero-weight instances instead of running them with weight 0.
    pub skip_zero_weights: bool,
    /// Keep the starting parameters if no epoch improves validation P@1.
    pub select_on_valid: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            skip_zero_weights: true,
            select_on_valid: true,
        }
    }
}

/// Mini-batch Adam on the weighted margin loss. Weights are constants: no
/// gradient reaches whatever produced them. Batches are drawn over all
/// instances and every batch takes an optimizer step, so whether zero-weight
/// instances are skipped has no effect on the result. Keeps the parameters
/// with the best validation P@1 (the starting point included).
pub fn finetune_weighted<F: Real>(
    model: Matcher<F>,
    instances: &[TrainingInstance],
    weights: &[f64],
    valid: &[EvalGroup],
    margin: MarginConfig,
    optim: &OptimConfig,
) -> Result<(Matcher<F>, History)> {
    finetune_weighted_with(model, instances, weights, valid, margin, optim, FinetuneOptions::default())
}

pub fn finetune_weighted_with<F: Real>(
    mut model: Matcher<F>,
    instances: &[TrainingInstance],
    weights: &[f64],
    valid: &[EvalGroup],
    margin: MarginConfig,
    optim: &OptimConfig,
    opts: FinetuneOptions,
) -> Result<(Matcher<F>, History)> {
    optim.validate()?;
    margin.validate()?;
    if instances.len() != weights.len() {
        return Err(Error::Data(format!(
            "{} instances but {} weights",
            instances.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Data(format!("weight {w} outside [0,1]")));
    }
    let mut history = History::new("valid_p_at_1");
    let select = opts.select_on_valid && !valid.is_empty();
    let initial = if select { valid_p_at_1(&model, valid)? } else { f64::NAN };
    history.valid_metric.push(initial);
    let mut sel = Selector::new(true, initial, &model);
    let mut adam = Adam::new(model.params(), optim.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();

    for epoch in 1..=optim.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(optim.batch_size).enumerate() {
            let batch: Vec<(&TrainingInstance, f64)> = chunk
                .iter()
                .filter(|&&i| !(opts.skip_zero_weights && weights[i] == 0.0))
                .map(|&i| (&instances[i], weights[i]))
                .collect();
            let (loss, grads) = weighted_margin_batch(&model, &batch, margin, opts.skip_zero_weights)?;
            check_finite(loss, &grads, epoch, b)?;
            total += loss;
            step(&mut model, &mut adam, grads, optim.grad_clip_norm, &mut history, epoch, b)?;
        }
        history.train_loss.push(total / instances.len().max(1) as f64);
        if !select {
            history.valid_metric.push(f64::NAN);
            history.best_epoch = epoch;
            continue;
        }
        let v = valid_p_at_1(&model, valid)?;
        history.valid_metric.push(v);
        if sel.offer(v, &model) {
            history.best_epoch = epoch;
        } else if sel.since_best >= optim.patience {
            history.stopped_early = true;
            break;
        }
    }
    if select {
        model.replace_params(sel.best_params)?;
    }
    Ok((model, history))
}
