//! Mini-batch training with validation-driven early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::Example;
use crate::metrics::{auc, gauc, GaucWeighting, ScoredLabel};
use crate::model::InfNet;
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::params::ForwardCtx;
use crate::tape::Tape;

const DROPOUT_KEY: u64 = 0x6472_6f70_6f75_7421;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub l2_weight: f64,
    pub dropout: f64,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Per-task loss weights; `None` means all ones.
    pub task_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            l2_weight: 0.0,
            dropout: 0.0,
            patience: 5,
            max_epochs: 30,
            seed: 42,
            grad_clip: 10.0,
            task_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.l2_weight.is_finite() && self.l2_weight >= 0.0) {
            return bad(format!(
                "l2_weight must be finite and >= 0, got {}",
                self.l2_weight
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!(
                "grad_clip must be finite and >= 0, got {}",
                self.grad_clip
            ));
        }
        if let Some(w) = &self.task_weights {
            if w.len() != tasks {
                return bad(format!("{} task weights for {tasks} tasks", w.len()));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad("task weights must be finite and >= 0".into());
            }
        }
        Ok(())
    }

    pub fn weights(&self, tasks: usize) -> Vec<f64> {
        self.task_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; tasks])
    }
}

/// One evaluation: optimizer step count, mean training loss since the
/// previous evaluation, and per-task validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: f64,
    pub auc: Vec<f64>,
    pub gauc: Vec<f64>,
}

impl HistoryRow {
    pub fn mean_auc(&self) -> f64 {
        self.auc.iter().sum::<f64>() / self.auc.len() as f64
    }
}

pub fn format_history(rows: &[HistoryRow], tasks: usize) -> String {
    let mut s = String::from("step\tloss");
    for i in 1..=tasks {
        write!(s, "\tauc_{i}").unwrap();
    }
    for i in 1..=tasks {
        write!(s, "\tgauc_{i}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{}\t{:.17e}", r.step, r.loss).unwrap();
        for v in r.auc.iter().chain(&r.gauc) {
            write!(s, "\t{v:.17e}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Per-task AUC and gAUC of `model` on `examples`. A gAUC with no eligible
/// user is reported as NaN; an undefined AUC is an error.
pub fn evaluate(
    model: &InfNet<f64>,
    examples: &[Example],
    weighting: GaucWeighting,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let probs = model.predict_batch(examples)?;
    let tasks = model.schema().tasks();
    let mut aucs = Vec::with_capacity(tasks);
    let mut gaucs = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let items: Vec<ScoredLabel<f64>> = examples
            .iter()
            .zip(&probs)
            .filter(|(ex, _)| ex.label_mask[t])
            .map(|(ex, p)| ScoredLabel::new(p[t], ex.labels[t], ex.user_id.clone()))
            .collect();
        aucs.push(auc(&items).map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("task {}: {m}", t + 1)),
            e => e,
        })?);
        gaucs.push(gauc(&items, weighting).unwrap_or(f64::NAN));
    }
    Ok((aucs, gaucs))
}

/// Result of a training run. `best` holds the parameters with the highest
/// mean validation AUC; `last` the state after the final epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
}

pub fn train(
    model: InfNet<f64>,
    cfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
) -> Result<TrainOutcome> {
    cfg.validate(model.schema().tasks())?;
    let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params().tensors());
    let last = Checkpoint {
        model,
        train: cfg.clone(),
        optimizer,
        epoch: 0,
        best_metric: f64::NEG_INFINITY,
        stale: 0,
        history: Vec::new(),
    };
    let best = last.clone();
    run(last, best, train, val)
}

/// Continues from `last` (and its paired `best`) until `max_epochs` total
/// epochs or patience runs out. With the same data this reproduces the
/// uninterrupted run exactly.
pub fn resume(
    mut last: Checkpoint,
    best: Checkpoint,
    max_epochs: usize,
    train: &[Example],
    val: &[Example],
) -> Result<TrainOutcome> {
    last.train.max_epochs = max_epochs;
    last.train.validate(last.model.schema().tasks())?;
    if best.model.params().ids().count() != last.model.params().ids().count() {
        return Err(Error::Config(
            "best and last checkpoints come from different models".into(),
        ));
    }
    run(last, best, train, val)
}

fn run(
    mut state: Checkpoint,
    mut best: Checkpoint,
    train: &[Example],
    val: &[Example],
) -> Result<TrainOutcome> {
    let schema = state.model.schema().data.clone();
    for ex in train.iter().chain(val) {
        ex.validate(&schema)?;
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let cfg = state.train.clone();
    let weights = cfg.weights(schema.tasks);
    let mut stopped_early = state.stale >= cfg.patience;

    while state.epoch < cfg.max_epochs && !stopped_early {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(state.epoch as u64);
        order.shuffle(&mut shuffle);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += train_step(&mut state, &cfg, &batch, &weights)?;
            batches += 1;
        }
        state.epoch += 1;

        let (aucs, gaucs) = evaluate(&state.model, val, GaucWeighting::Impressions)?;
        let row = HistoryRow {
            step: state.optimizer.step,
            loss: loss_sum / batches as f64,
            auc: aucs,
            gauc: gaucs,
        };
        let metric = row.mean_auc();
        state.history.push(row);
        if metric > state.best_metric {
            state.best_metric = metric;
            state.stale = 0;
            best = state.clone();
        } else {
            state.stale += 1;
            stopped_early = state.stale >= cfg.patience;
        }
    }
    best.history = state.history.clone();
    Ok(TrainOutcome {
        history: state.history.clone(),
        best,
        last: state,
        stopped_early,
    })
}

/// Forward, backward and one optimizer update on `batch`. Returns the loss.
fn train_step(
    state: &mut Checkpoint,
    cfg: &TrainConfig,
    batch: &[&Example],
    weights: &[f64],
) -> Result<f64> {
    let step = state.optimizer.step;
    let mut tape = Tape::new();
    let p = state.model.params().bind(&mut tape);
    let mut ctx = if cfg.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_KEY);
        rng.set_stream(step);
        ForwardCtx::train(cfg.dropout, rng)
    } else {
        ForwardCtx::eval()
    };
    let mut loss = state
        .model
        .batch_loss(&mut tape, &p, batch, weights, &mut ctx)?;
    if cfg.l2_weight > 0.0 {
        let mut terms = Vec::with_capacity(p.vars().len());
        for &v in p.vars() {
            let sq = tape.mul(v, v)?;
            let s = tape.sum(sq);
            terms.push(tape.reshape(s, &[1, 1])?);
        }
        let all = tape.concat_rows(&terms)?;
        let total = tape.sum(all);
        let reg = tape.scale(total, cfg.l2_weight);
        loss = tape.add(loss, reg)?;
    }
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: step + 1,
            reason: format!("loss = {value}"),
        });
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(state.model.params().tensors())
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    if cfg.grad_clip > 0.0 {
        let norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                reason: format!("gradient norm = {norm}"),
            });
        }
    }
    state
        .optimizer
        .step(state.model.params_mut().tensors_mut(), &grads)?;
    if let Some((name, _)) = state.model.params().iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence {
            step: step + 1,
            reason: format!("parameter `{name}` is no longer finite"),
        });
    }
    Ok(value)
}
