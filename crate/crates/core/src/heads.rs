//! Per-task prediction heads and the weighted multi-task objective.

use crate::block::BlockState;
use crate::error::{Error, Result};
use crate::features::Example;
use crate::params::{Bound, ForwardCtx, Init, Linear, Mlp, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var, BCE_EPS};

/// One MLP per task (same architecture, separate parameters). Without task
/// tokens each head reads a per-task affine readout of the final categorical
/// and sequence proxies instead of a task-token row.
#[derive(Clone, Debug)]
pub struct Heads {
    pub mlps: Vec<Mlp>,
    pub readout: Option<Vec<Linear>>,
}

impl Heads {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        tasks: usize,
        d: usize,
        readout_in: Option<usize>,
    ) -> Self {
        let readout = readout_in.map(|n| {
            (0..tasks)
                .map(|i| Linear::new(store, init, &format!("readout{i}"), n, d))
                .collect()
        });
        let mlps = (0..tasks)
            .map(|i| Mlp::new(store, init, &format!("head{i}"), d, d, 1))
            .collect();
        Heads { mlps, readout }
    }

    pub fn tasks(&self) -> usize {
        self.mlps.len()
    }
}

/// ŷ (N_task×1): `σ(MLP_i(row i of T_final))`.
pub fn predict<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    heads: &Heads,
    t_final: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let rows = tape.value(t_final).rows();
    if rows != heads.tasks() {
        return Err(Error::Shape {
            op: "predict",
            lhs: tape.shape(t_final).to_vec(),
            rhs: vec![heads.tasks()],
        });
    }
    let mut logits = Vec::with_capacity(rows);
    for (i, mlp) in heads.mlps.iter().enumerate() {
        let row = tape.slice_rows(t_final, i, 1)?;
        logits.push(mlp.forward(tape, p, row, ctx)?);
    }
    let z = tape.concat_rows(&logits)?;
    Ok(tape.sigmoid(z))
}

/// Predictions from whatever the final state offers: task tokens if present,
/// otherwise the per-task readout over `[C̃; S̃]`.
pub fn predict_from_state<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    heads: &Heads,
    state: &BlockState,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if let Some(t) = state.t {
        return predict(tape, p, heads, t, ctx);
    }
    let readout = heads
        .readout
        .as_ref()
        .ok_or_else(|| Error::Config("no task tokens and no readout configured".into()))?;
    let both = tape.concat_rows(&[state.c_proxy, state.s_proxy])?;
    let n = tape.value(both).len();
    let flat = tape.flatten(both);
    let row = tape.reshape(flat, &[1, n])?;
    let mut logits = Vec::with_capacity(heads.tasks());
    for (mlp, lin) in heads.mlps.iter().zip(readout) {
        let r = lin.forward(tape, p, row)?;
        logits.push(mlp.forward(tape, p, r, ctx)?);
    }
    let z = tape.concat_rows(&logits)?;
    Ok(tape.sigmoid(z))
}

/// `−[y ln ŷ + (1 − y) ln(1 − ŷ)]` with ŷ clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce<T: Real>(prob: T, label: u8) -> Result<T> {
    if label > 1 {
        return Err(Error::Schema(format!("label {label} is not 0 or 1")));
    }
    let eps = T::lit(BCE_EPS);
    let p = prob.max(eps).min(T::one() - eps);
    Ok(if label == 1 {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    })
}

/// Batch mean of `Σ_i λ_i · bce(ŷ_i, y_i)` over each example's observed
/// tasks. `probs[k]` holds the N_task×1 predictions for `examples[k]`.
pub fn multi_task_loss<T: Real>(
    tape: &mut Tape<T>,
    probs: &[Var],
    examples: &[&Example],
    task_weights: &[T],
) -> Result<Var> {
    if probs.len() != examples.len() || probs.is_empty() {
        return Err(Error::Shape {
            op: "multi_task_loss",
            lhs: vec![probs.len()],
            rhs: vec![examples.len()],
        });
    }
    if !examples.iter().any(|e| e.label_mask.iter().any(|&m| m)) {
        return Err(Error::NoSignal);
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (&pv, ex) in probs.iter().zip(examples) {
        if ex.labels.len() != task_weights.len() || tape.value(pv).len() != task_weights.len() {
            return Err(Error::Shape {
                op: "multi_task_loss",
                lhs: tape.shape(pv).to_vec(),
                rhs: vec![task_weights.len()],
            });
        }
        let labels: Vec<T> = ex
            .labels
            .iter()
            .map(|&y| T::from_count(y as usize))
            .collect();
        let w: Vec<T> = task_weights
            .iter()
            .zip(&ex.label_mask)
            .map(|(&l, &m)| if m { l } else { T::zero() })
            .collect();
        let b = tape.bce(pv, &labels, &w)?;
        terms.push(tape.reshape(b, &[1, 1])?);
    }
    let stacked = tape.concat_rows(&terms)?;
    Ok(tape.mean(stacked))
}
