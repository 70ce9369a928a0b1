//! The stackable block: proxy-queried cross attention between token
//! families (heterogeneous stage), then proxy-gated channel modulation
//! within each family (homogeneous stage).

use crate::error::{Error, Result};
use crate::features::TokenSet;
use crate::params::{AttentionCapture, Bound, ForwardCtx, Init, Mlp, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Token matrices of one layer, as tape variables.
///
/// `t`/`t_proxy` are absent when the model runs without task tokens. `t_hat`
/// holds the intermediate task update of the last heterogeneous stage.
#[derive(Clone, Debug)]
pub struct BlockState {
    pub c: Var,
    pub c_proxy: Var,
    pub s: Var,
    pub s_proxy: Var,
    pub t: Option<Var>,
    pub t_proxy: Option<Var>,
    pub t_hat: Option<Var>,
    pub seq_mask: Vec<bool>,
}

impl BlockState {
    pub fn snapshot<T: Real>(&self, tape: &Tape<T>) -> TokenSet<T> {
        let val = |v: Var| tape.value(v).clone();
        TokenSet {
            c: val(self.c),
            c_proxy: val(self.c_proxy),
            s: val(self.s),
            s_proxy: val(self.s_proxy),
            t: self.t.map(val),
            t_proxy: self.t_proxy.map(val),
            seq_mask: self.seq_mask.clone(),
        }
    }
}

/// Projections of one cross-attention instance.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttnIds {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        d_k: usize,
    ) -> Self {
        AttnIds {
            w_q: store.add(format!("{name}.w_q"), init.uniform(&[d, d_k])),
            w_k: store.add(format!("{name}.w_k"), init.uniform(&[d, d_k])),
            w_v: store.add(format!("{name}.w_v"), init.uniform(&[d, d])),
        }
    }
}

/// Flows that involve task tokens.
#[derive(Clone, Debug)]
pub struct TaskFlows {
    pub cat_from_task: AttnIds,
    pub seq_from_task: AttnIds,
    pub shared_from_cat: AttnIds,
    pub shared_from_seq: AttnIds,
    pub task_from_cat: AttnIds,
    pub task_from_seq: AttnIds,
}

#[derive(Clone, Debug)]
pub struct Flows {
    pub cat_from_seq: AttnIds,
    pub seq_from_cat: AttnIds,
    pub task: Option<TaskFlows>,
}

/// Gate maps of the three proxy gated units.
#[derive(Clone, Debug)]
pub struct Gates {
    pub cat: Mlp,
    pub seq: Mlp,
    pub task: Option<Mlp>,
}

/// Parameters of one block. A missing stage is skipped: no flows means every
/// cross-attention term is zero, no gates means identity refinement.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub flows: Option<Flows>,
    pub gates: Option<Gates>,
}

/// Shape settings shared by all blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d: usize,
    pub d_k: usize,
    pub heads: usize,
    pub cat_proxies: usize,
    pub behaviors: usize,
    pub tasks: usize,
    pub shared: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 {
            return Err(Error::Config("attention heads and d_k must be >= 1".into()));
        }
        if !self.d_k.is_multiple_of(self.heads) || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d ({}) and d_k ({}) must be divisible by the head count ({})",
                self.d, self.d_k, self.heads
            )));
        }
        Ok(())
    }
}

impl BlockParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        index: usize,
        dims: &BlockDims,
        heterogeneous: bool,
        homogeneous: bool,
        task_tokens: bool,
    ) -> Self {
        let (d, dk) = (dims.d, dims.d_k);
        let pre = format!("block{index}");
        let mut attn = |name: &str| AttnIds::new(store, init, &format!("{pre}.{name}"), d, dk);
        let flows = heterogeneous.then(|| Flows {
            cat_from_seq: attn("cat_from_seq"),
            seq_from_cat: attn("seq_from_cat"),
            task: task_tokens.then(|| TaskFlows {
                cat_from_task: attn("cat_from_task"),
                seq_from_task: attn("seq_from_task"),
                shared_from_cat: attn("shared_from_cat"),
                shared_from_seq: attn("shared_from_seq"),
                task_from_cat: attn("task_from_cat"),
                task_from_seq: attn("task_from_seq"),
            }),
        });
        let gates = homogeneous.then(|| Gates {
            cat: Mlp::new(
                store,
                init,
                &format!("{pre}.pgu_cat"),
                dims.cat_proxies * d,
                d,
                d,
            ),
            seq: Mlp::new(
                store,
                init,
                &format!("{pre}.pgu_seq"),
                dims.behaviors * d,
                d,
                d,
            ),
            task: task_tokens.then(|| {
                Mlp::new(
                    store,
                    init,
                    &format!("{pre}.pgu_task"),
                    dims.shared * d,
                    d,
                    d,
                )
            }),
        });
        BlockParams { flows, gates }
    }
}

/// `softmax((Q·W_Q)(K·W_K)ᵀ/√d_k)·(V·W_V)` with keys and values taken from
/// the same token matrix. Keys where `key_mask` is false are excluded; if no
/// key survives the result is the zero matrix. With several heads the
/// projected queries/keys/values are split column-wise and the head outputs
/// concatenated.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    attn: &AttnIds,
    queries: Var,
    keys: Var,
    key_mask: Option<&[bool]>,
    heads: usize,
    ctx: &mut ForwardCtx,
    label: &'static str,
) -> Result<Var> {
    let nq = tape.value(queries).rows();
    let (nk, d) = (tape.value(keys).rows(), tape.value(keys).cols());
    let dv = tape.value(p.var(attn.w_v)).cols();
    if tape.value(queries).cols() != d {
        return Err(Error::Shape {
            op: "cross_attention",
            lhs: tape.shape(queries).to_vec(),
            rhs: tape.shape(keys).to_vec(),
        });
    }
    let live: Vec<usize> = match key_mask {
        Some(mask) => {
            if mask.len() != nk {
                return Err(Error::Shape {
                    op: "cross_attention mask",
                    lhs: tape.shape(keys).to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            (0..nk).filter(|&i| mask[i]).collect()
        }
        None => (0..nk).collect(),
    };
    if live.is_empty() {
        if let Some(caps) = ctx.captures.as_mut() {
            caps.push(AttentionCapture {
                block: ctx.block,
                flow: label,
                weights: Tensor::zeros(&[nq, nk]),
            });
        }
        return Ok(tape.constant(Tensor::zeros(&[nq, dv])));
    }
    let kv = if live.len() == nk {
        keys
    } else {
        tape.select_rows(keys, &live)?
    };

    let qp = tape.matmul(queries, p.var(attn.w_q))?;
    let kp = tape.matmul(kv, p.var(attn.w_k))?;
    let vp = tape.matmul(kv, p.var(attn.w_v))?;
    let dk = tape.value(qp).cols();
    let (dh, dvh) = (dk / heads, dv / heads);
    let scale = T::one() / T::from_count(dh).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, h * dh, dh)?,
                tape.slice_cols(kp, h * dh, dh)?,
                tape.slice_cols(vp, h * dvh, dvh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax_rows(logits)?;
        weights.push(a);
        outs.push(tape.matmul(a, vh)?);
    }
    if let Some(captures) = ctx.captures.as_mut() {
        let mut full = Tensor::<f64>::zeros(&[nq, nk]);
        let inv = 1.0 / heads as f64;
        for &a in &weights {
            let w = tape.value(a);
            for r in 0..nq {
                for (c, &k) in live.iter().enumerate() {
                    full.data_mut()[r * nk + k] += w.at(r, c).as_f64() * inv;
                }
            }
        }
        captures.push(AttentionCapture {
            block: ctx.block,
            flow: label,
            weights: full,
        });
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    ctx.dropout(tape, out)
}

/// C̃ ← C̃ + CA(C̃, S, S) + CA(C̃, T, T).
pub fn flow_to_categorical<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    flows: &Flows,
    state: &BlockState,
    heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let from_seq = cross_attention(
        tape,
        p,
        &flows.cat_from_seq,
        state.c_proxy,
        state.s,
        Some(&state.seq_mask),
        heads,
        ctx,
        "cat_from_seq",
    )?;
    let mut out = tape.add(state.c_proxy, from_seq)?;
    if let (Some(tf), Some(t)) = (&flows.task, state.t) {
        let from_task = cross_attention(
            tape,
            p,
            &tf.cat_from_task,
            state.c_proxy,
            t,
            None,
            heads,
            ctx,
            "cat_from_task",
        )?;
        out = tape.add(out, from_task)?;
    }
    Ok(out)
}

/// S̃ ← S̃ + CA(S̃, C, C) + CA(S̃, T, T).
pub fn flow_to_sequence<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    flows: &Flows,
    state: &BlockState,
    heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let from_cat = cross_attention(
        tape,
        p,
        &flows.seq_from_cat,
        state.s_proxy,
        state.c,
        None,
        heads,
        ctx,
        "seq_from_cat",
    )?;
    let mut out = tape.add(state.s_proxy, from_cat)?;
    if let (Some(tf), Some(t)) = (&flows.task, state.t) {
        let from_task = cross_attention(
            tape,
            p,
            &tf.seq_from_task,
            state.s_proxy,
            t,
            None,
            heads,
            ctx,
            "seq_from_task",
        )?;
        out = tape.add(out, from_task)?;
    }
    Ok(out)
}

/// Returns (T̃', T̂): T̃ + CA(T̃, C, C) + CA(T̃, S, S) and
/// T + CA(T, C, C) + CA(T, S, S), with disjoint parameters.
pub fn flow_to_task<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    tf: &TaskFlows,
    state: &BlockState,
    heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    let (t, tp) = match (state.t, state.t_proxy) {
        (Some(t), Some(tp)) => (t, tp),
        _ => return Err(Error::Config("task flow needs task tokens".into())),
    };
    let mask = Some(state.seq_mask.as_slice());
    let sc = cross_attention(
        tape,
        p,
        &tf.shared_from_cat,
        tp,
        state.c,
        None,
        heads,
        ctx,
        "shared_from_cat",
    )?;
    let ss = cross_attention(
        tape,
        p,
        &tf.shared_from_seq,
        tp,
        state.s,
        mask,
        heads,
        ctx,
        "shared_from_seq",
    )?;
    let shared = tape.add(tp, sc)?;
    let shared = tape.add(shared, ss)?;
    let tc = cross_attention(
        tape,
        p,
        &tf.task_from_cat,
        t,
        state.c,
        None,
        heads,
        ctx,
        "task_from_cat",
    )?;
    let ts = cross_attention(
        tape,
        p,
        &tf.task_from_seq,
        t,
        state.s,
        mask,
        heads,
        ctx,
        "task_from_seq",
    )?;
    let t_hat = tape.add(t, tc)?;
    let t_hat = tape.add(t_hat, ts)?;
    Ok((shared, t_hat))
}

/// Channel gate `σ(MLP(flatten(X̃)))` as a 1×d row.
pub fn pgu_gate<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    gate: &Mlp,
    proxy: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let expected = tape.value(p.var(gate.hidden.w)).rows();
    let n = tape.value(proxy).len();
    if n != expected {
        return Err(Error::Shape {
            op: "pgu",
            lhs: tape.shape(proxy).to_vec(),
            rhs: vec![expected],
        });
    }
    let flat = tape.flatten(proxy);
    let row = tape.reshape(flat, &[1, n])?;
    let logits = gate.forward(tape, p, row, ctx)?;
    Ok(tape.sigmoid(logits))
}

/// `X ⊙ σ(MLP(flatten(X̃)))`, the gate broadcast over every row of X.
pub fn pgu<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    gate: &Mlp,
    x: Var,
    proxy: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let g = pgu_gate(tape, p, gate, proxy, ctx)?;
    tape.mul_row(x, g)
}

/// One block. Every heterogeneous flow reads layer-l tensors only; the
/// gates use the layer-l proxies.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    params: &BlockParams,
    state: &BlockState,
    heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<BlockState> {
    let (c_proxy, s_proxy, t_proxy, t_hat) = match &params.flows {
        Some(flows) => {
            let c_proxy = flow_to_categorical(tape, p, flows, state, heads, ctx)?;
            let s_proxy = flow_to_sequence(tape, p, flows, state, heads, ctx)?;
            let (t_proxy, t_hat) = match &flows.task {
                Some(tf) if state.t.is_some() => {
                    let (tp, th) = flow_to_task(tape, p, tf, state, heads, ctx)?;
                    (Some(tp), Some(th))
                }
                _ => (state.t_proxy, state.t),
            };
            (c_proxy, s_proxy, t_proxy, t_hat)
        }
        None => (state.c_proxy, state.s_proxy, state.t_proxy, state.t),
    };

    let (c, s, t) = match &params.gates {
        Some(g) => {
            let c = pgu(tape, p, &g.cat, state.c, state.c_proxy, ctx)?;
            let s = pgu(tape, p, &g.seq, state.s, state.s_proxy, ctx)?;
            let s = tape.mask_rows(s, &state.seq_mask)?;
            let t = match (&g.task, t_hat, state.t_proxy) {
                (Some(gt), Some(th), Some(tp)) => Some(pgu(tape, p, gt, th, tp, ctx)?),
                _ => t_hat,
            };
            (c, s, t)
        }
        None => (state.c, state.s, t_hat),
    };

    Ok(BlockState {
        c,
        c_proxy,
        s,
        s_proxy,
        t,
        t_proxy,
        t_hat,
        seq_mask: state.seq_mask.clone(),
    })
}

/// Applies the blocks in order.
pub fn stack_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    blocks: &[BlockParams],
    state: BlockState,
    heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<BlockState> {
    if blocks.is_empty() {
        return Err(Error::Config("at least one block is required".into()));
    }
    let mut state = state;
    for (l, block) in blocks.iter().enumerate() {
        ctx.block = l;
        state = block_forward(tape, p, block, &state, heads, ctx)?;
    }
    Ok(state)
}
