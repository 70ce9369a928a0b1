//! Finite-difference checks over every tape operation and every model
//! component on a toy schema (three categorical fields, two behaviors,
//! d = 8, two tasks, two blocks).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{
    block_forward, cross_attention, pgu_gate, AttnIds, BlockDims, BlockParams, BlockState,
};
use crate::error::Result;
use crate::features::{tokenize, DataSchema, EmbeddingTables, Example, FeatureSchema};
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::heads::{multi_task_loss, predict, Heads};
use crate::model::{InfNet, ModelConfig};
use crate::params::{Bound, ForwardCtx, Init, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Deliberate defects for exercising the checker itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The PGU gate product back-propagates the gate gradient with the
    /// wrong sign.
    PguSignFlip,
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

pub fn toy_schema() -> FeatureSchema {
    FeatureSchema::new(
        DataSchema {
            cards: vec![4, 5, 6],
            lens: vec![3, 4],
            vocabs: vec![7, 6],
            tasks: 2,
        },
        8,
    )
}

/// Two examples exercising truncation, padding, an empty behavior and a
/// masked label.
pub fn toy_examples() -> Vec<Example> {
    vec![
        Example {
            user_id: "a".into(),
            categorical: vec![2, 5, 1],
            sequences: vec![vec![1, 7, 3, 2], vec![6]],
            labels: vec![1, 0],
            label_mask: vec![true, true],
        },
        Example {
            user_id: "b".into(),
            categorical: vec![4, 1, 6],
            sequences: vec![vec![], vec![2, 2, 5]],
            labels: vec![0, 1],
            label_mask: vec![true, false],
        },
    ]
}

struct Rand(ChaCha8Rng);

impl Rand {
    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(-1.0..1.0)).collect())
            .expect("valid shape")
    }

    /// Entries at least 0.05 away from zero, so ReLU kinks stay out of reach
    /// of the finite-difference step.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.tensor(shape);
        for x in t.data_mut() {
            *x = x.signum() * (0.05 + x.abs());
        }
        t
    }
}

/// Σ R ⊙ v for a fixed random R, turning any tensor into a scalar with a
/// generic upstream gradient.
fn probe(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let r = Rand(ChaCha8Rng::seed_from_u64(seed)).tensor(&shape);
    let rv = tape.constant(r);
    let m = tape.mul(v, rv)?;
    Ok(tape.sum(m))
}

fn probe_all(tape: &mut Tape<f64>, vs: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (k, &v) in vs.iter().enumerate() {
        let s = probe(tape, v, 1000 + k as u64)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one output"))
}

fn check<F>(name: &'static str, xs: &[Tensor<f64>], f: F) -> Result<ComponentReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check_many(f, xs, STEP, TOLERANCE)?;
    Ok(ComponentReport { name, report })
}

/// `x ⊙ g` (g broadcast over rows) with a backward that negates the gate
/// gradient.
fn faulty_mul_row(tape: &mut Tape<f64>, x: Var, g: Var) -> Result<Var> {
    let good = tape.mul_row(x, g)?;
    let value = tape.value(good).clone();
    Ok(tape.custom(
        &[x, g],
        value,
        Box::new(|ins, _out, up| {
            let (x, g) = (ins[0], ins[1]);
            let n = g.len();
            let dx = up
                .iter()
                .enumerate()
                .map(|(i, &u)| u * g.data()[i % n])
                .collect();
            let mut dg = vec![0.0; n];
            for (i, &u) in up.iter().enumerate() {
                dg[i % n] -= u * x.data()[i];
            }
            vec![dx, dg]
        }),
    ))
}

fn ops(rng: &mut Rand) -> Result<Vec<ComponentReport>> {
    let mut out = Vec::new();
    let (a, b) = (rng.tensor(&[3, 4]), rng.tensor(&[4, 2]));
    out.push(check("op.matmul", &[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, 1)
    })?);

    let (a, b) = (rng.tensor(&[2, 3]), rng.tensor(&[2, 3]));
    out.push(check("op.elementwise", &[a, b], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let m = t.mul(s, d)?;
        let y = t.scale(m, -1.7);
        probe(t, y, 2)
    })?);

    let (x, r) = (rng.tensor(&[3, 4]), rng.tensor(&[1, 4]));
    out.push(check("op.row_broadcast", &[x, r], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        let y = t.mul_row(y, v[1])?;
        probe(t, y, 3)
    })?);

    out.push(check("op.relu", &[rng.away_from_zero(&[3, 3])], |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, 4)
    })?);

    out.push(check("op.sigmoid", &[rng.tensor(&[2, 5])], |t, v| {
        let y = t.sigmoid(v[0]);
        probe(t, y, 5)
    })?);

    out.push(check("op.softmax", &[rng.tensor(&[3, 5])], |t, v| {
        let y = t.softmax_rows(v[0])?;
        let z = t.softmax_rows_masked(v[0], &[true, false, true, true, false])?;
        probe_all(t, &[y, z])
    })?);

    let (a, b) = (rng.tensor(&[3, 4]), rng.tensor(&[2, 4]));
    out.push(check("op.shape", &[a, b], |t, v| {
        let tr = t.transpose(v[0])?;
        let r = t.reshape(v[0], &[2, 6])?;
        let f = t.flatten(v[1]);
        let cr = t.concat_rows(&[v[0], v[1]])?;
        let cc = t.concat_cols(&[v[1], v[1]])?;
        let sr = t.slice_rows(cr, 1, 3)?;
        let sc = t.slice_cols(cc, 2, 5)?;
        let sel = t.select_rows(v[0], &[2, 0, 2])?;
        let msk = t.mask_rows(v[0], &[true, false, true])?;
        probe_all(t, &[tr, r, f, sr, sc, sel, msk])
    })?);

    out.push(check("op.reductions", &[rng.tensor(&[3, 4])], |t, v| {
        let a = t.sum_rows(v[0])?;
        let b = t.sum(v[0]);
        let c = t.mean(v[0]);
        probe_all(t, &[a, b, c])
    })?);

    out.push(check("op.bce", &[rng.tensor(&[4, 1])], |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce(p, &[1.0, 0.0, 1.0, 0.0], &[1.0, 0.5, 0.0, 2.0])
    })?);
    Ok(out)
}

fn tokens_from(vars: &[Var], seq_mask: Vec<bool>) -> BlockState {
    BlockState {
        c: vars[0],
        c_proxy: vars[1],
        s: vars[2],
        s_proxy: vars[3],
        t: Some(vars[4]),
        t_proxy: Some(vars[5]),
        t_hat: None,
        seq_mask,
    }
}

fn modules(rng: &mut Rand, fault: Option<Fault>) -> Result<Vec<ComponentReport>> {
    let schema = toy_schema();
    let data = schema.data.clone();
    let d = schema.d;
    let (m, f, l, n, ns) = (
        schema.cat_proxies,
        data.num_behaviors(),
        data.total_len(),
        data.tasks,
        schema.shared_task_tokens,
    );
    let examples = toy_examples();
    let mut out = Vec::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(rng.0.gen()), d);

    // Embedding lookup and both proxy builders.
    let mut store = ParamStore::new();
    let tables = EmbeddingTables::new(&mut store, &mut init, &schema, None);
    out.push(check("tokenize", store.tensors(), |t, v| {
        let p = Bound::from_vars(v.to_vec());
        let mut outs = Vec::new();
        for ex in &examples {
            let st = tokenize(t, &p, &tables, &schema, ex, &mut ForwardCtx::eval())?;
            outs.extend([st.c, st.c_proxy, st.s, st.s_proxy]);
        }
        probe_all(t, &outs)
    })?);

    // Cross attention with a key mask, single and multi head.
    for (name, heads) in [("cross_attention", 1), ("cross_attention.2heads", 2)] {
        let mut store = ParamStore::new();
        let attn = AttnIds::new(&mut store, &mut init, "ca", d, d);
        let mut xs = store.tensors().to_vec();
        xs.push(rng.tensor(&[3, d]));
        xs.push(rng.tensor(&[5, d]));
        let mask = [true, true, false, true, false];
        out.push(check(name, &xs, |t, v| {
            let p = Bound::from_vars(v[..3].to_vec());
            let y = cross_attention(
                t,
                &p,
                &attn,
                v[3],
                v[4],
                Some(&mask),
                heads,
                &mut ForwardCtx::eval(),
                "ca",
            )?;
            probe(t, y, 6)
        })?);
    }

    // Proxy gated unit.
    let mut store = ParamStore::new();
    let gate = Mlp::new(&mut store, &mut init, "pgu", f * d, d, d);
    let mut xs = store.tensors().to_vec();
    xs.push(rng.tensor(&[l, d]));
    xs.push(rng.tensor(&[f, d]));
    out.push(check("pgu", &xs, |t, v| {
        let p = Bound::from_vars(v[..4].to_vec());
        let g = pgu_gate(t, &p, &gate, v[5], &mut ForwardCtx::eval())?;
        let y = match fault {
            Some(Fault::PguSignFlip) => faulty_mul_row(t, v[4], g)?,
            None => t.mul_row(v[4], g)?,
        };
        probe(t, y, 7)
    })?);

    // One full block, differentiating parameters and all six token inputs.
    let dims = BlockDims {
        d,
        d_k: d,
        heads: 1,
        cat_proxies: m,
        behaviors: f,
        tasks: n,
        shared: ns,
    };
    let mut store = ParamStore::new();
    let block = BlockParams::new(&mut store, &mut init, 0, &dims, true, true, true);
    let np = store.len();
    let mut xs = store.tensors().to_vec();
    for shape in [
        [data.num_fields(), d],
        [m, d],
        [l, d],
        [f, d],
        [n, d],
        [ns, d],
    ] {
        xs.push(rng.tensor(&shape));
    }
    let seq_mask = examples[0].seq_mask(&data);
    out.push(check("block", &xs, |t, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let state = tokens_from(&v[np..], seq_mask.clone());
        let next = block_forward(t, &p, &block, &state, 1, &mut ForwardCtx::eval())?;
        let outs = [
            next.c,
            next.c_proxy,
            next.s,
            next.s_proxy,
            next.t.expect("task tokens"),
            next.t_proxy.expect("shared tokens"),
        ];
        probe_all(t, &outs)
    })?);

    // Heads and the masked, weighted multi-task loss.
    let mut store = ParamStore::new();
    let heads = Heads::new(&mut store, &mut init, n, d, None);
    let np = store.len();
    let mut xs = store.tensors().to_vec();
    xs.push(rng.tensor(&[n, d]));
    xs.push(rng.tensor(&[n, d]));
    let batch: Vec<&Example> = examples.iter().collect();
    out.push(check("heads_loss", &xs, |t, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let mut probs = Vec::new();
        for &tf in &v[np..] {
            probs.push(predict(t, &p, &heads, tf, &mut ForwardCtx::eval())?);
        }
        multi_task_loss(t, &probs, &batch, &[1.0, 0.7])
    })?);

    // The whole two-block network, every parameter.
    let model = InfNet::<f64>::new(schema.clone(), ModelConfig::default(), rng.0.gen())?;
    out.push(check("model", model.params().tensors(), |t, v| {
        let p = Bound::from_vars(v.to_vec());
        model.batch_loss(t, &p, &batch, &[1.0, 0.7], &mut ForwardCtx::eval())
    })?);
    Ok(out)
}

/// Runs every check. A failing comparison is reported, not returned as an
/// error; errors mean a component could not be evaluated at all.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<ComponentReport>> {
    let mut rng = Rand(ChaCha8Rng::seed_from_u64(seed));
    let mut out = ops(&mut rng)?;
    out.extend(modules(&mut rng, fault)?);
    Ok(out)
}

pub fn format_reports(reports: &[ComponentReport]) -> String {
    let mut s = String::from("component\tchecked\tmax_rel_error\tstatus\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{}\t{:.3e}\t{}\n",
            r.name,
            r.report.checked,
            r.report.max_rel_error,
            if r.report.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
