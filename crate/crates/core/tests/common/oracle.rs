//! Plain-loop reference implementations. Nothing here touches the tape: each
//! function recomputes a quantity from raw parameter values with explicit
//! loops so that it can serve as an independent check.

use infnet::features::{Example, FeatureSchema};
use infnet::metrics::{GaucWeighting, ScoredLabel};
use infnet::params::ParamStore;
use infnet::tensor::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(&[m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Single-head attention by loops: for each query, score every unmasked
/// key, normalize with max subtraction, and mix the projected values.
pub fn attention(q: &Mat, k: &Mat, mask: Option<&[bool]>, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let qp = matmul(q, wq);
    let kp = matmul(k, wk);
    let vp = matmul(k, wv);
    let dk = wq[0].len() as f64;
    let dv = wv[0].len();
    let live: Vec<usize> = (0..k.len())
        .filter(|&j| mask.is_none_or(|m| m[j]))
        .collect();
    let mut out = vec![vec![0.0; dv]; q.len()];
    if live.is_empty() {
        return out;
    }
    for (i, qi) in qp.iter().enumerate() {
        let scores: Vec<f64> = live
            .iter()
            .map(|&j| qi.iter().zip(&kp[j]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (e, &j) in exps.iter().zip(&live) {
            for c in 0..dv {
                out[i][c] += e / z * vp[j][c];
            }
        }
    }
    out
}

/// Parameter lookup by name.
pub struct Named<'a>(pub &'a ParamStore<f64>);

impl Named<'_> {
    pub fn get(&self, name: &str) -> Mat {
        let id = self
            .0
            .find(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"));
        mat(self.0.get(id))
    }

    pub fn has(&self, name: &str) -> bool {
        self.0.find(name).is_some()
    }

    pub fn linear(&self, x: &[f64], name: &str) -> Vec<f64> {
        let w = self.get(&format!("{name}.w"));
        let b = &self.get(&format!("{name}.b"))[0];
        (0..b.len())
            .map(|c| {
                b[c] + x
                    .iter()
                    .enumerate()
                    .map(|(k, xk)| xk * w[k][c])
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn mlp(&self, x: &[f64], name: &str) -> Vec<f64> {
        let h: Vec<f64> = self
            .linear(x, &format!("{name}.hidden"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        self.linear(&h, &format!("{name}.out"))
    }

    pub fn attend(&self, q: &Mat, k: &Mat, mask: Option<&[bool]>, name: &str) -> Mat {
        attention(
            q,
            k,
            mask,
            &self.get(&format!("{name}.w_q")),
            &self.get(&format!("{name}.w_k")),
            &self.get(&format!("{name}.w_v")),
        )
    }

    fn gate(&self, x: &Mat, proxy: &Mat, name: &str) -> Mat {
        let g: Vec<f64> = self
            .mlp(&flat(proxy), name)
            .into_iter()
            .map(sigmoid)
            .collect();
        x.iter()
            .map(|r| r.iter().zip(&g).map(|(a, b)| a * b).collect())
            .collect()
    }
}

/// Block state with task tokens, as plain matrices.
#[derive(Clone, Debug)]
pub struct State {
    pub c: Mat,
    pub cp: Mat,
    pub s: Mat,
    pub sp: Mat,
    pub t: Mat,
    pub tp: Mat,
    pub mask: Vec<bool>,
}

/// One full block written out term by term.
pub fn block(p: &Named, index: usize, st: &State) -> State {
    let n = |s: &str| format!("block{index}.{s}");
    let m = Some(st.mask.as_slice());
    let cp = add(
        &add(&st.cp, &p.attend(&st.cp, &st.s, m, &n("cat_from_seq"))),
        &p.attend(&st.cp, &st.t, None, &n("cat_from_task")),
    );
    let sp = add(
        &add(&st.sp, &p.attend(&st.sp, &st.c, None, &n("seq_from_cat"))),
        &p.attend(&st.sp, &st.t, None, &n("seq_from_task")),
    );
    let tp = add(
        &add(
            &st.tp,
            &p.attend(&st.tp, &st.c, None, &n("shared_from_cat")),
        ),
        &p.attend(&st.tp, &st.s, m, &n("shared_from_seq")),
    );
    let t_hat = add(
        &add(&st.t, &p.attend(&st.t, &st.c, None, &n("task_from_cat"))),
        &p.attend(&st.t, &st.s, m, &n("task_from_seq")),
    );
    let c = p.gate(&st.c, &st.cp, &n("pgu_cat"));
    let mut s = p.gate(&st.s, &st.sp, &n("pgu_seq"));
    for (row, &keep) in s.iter_mut().zip(&st.mask) {
        if !keep {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let t = p.gate(&t_hat, &st.tp, &n("pgu_task"));
    State {
        c,
        cp,
        s,
        sp,
        t,
        tp,
        mask: st.mask.clone(),
    }
}

/// Layer-0 tokens of a full-mode model.
pub fn tokenize(p: &Named, schema: &FeatureSchema, ex: &Example) -> State {
    let d = schema.d;
    let data = &schema.data;
    let c: Mat = ex
        .categorical
        .iter()
        .enumerate()
        .map(|(j, &v)| p.get(&format!("embed.cat{j}"))[v - 1].clone())
        .collect();
    let cp_flat = p.mlp(&flat(&c), "phi_cat");
    let cp: Mat = cp_flat.chunks(d).map(<[f64]>::to_vec).collect();
    let mut s = Vec::new();
    let mut mask = Vec::new();
    let mut sp = Vec::new();
    for (a, &n) in data.lens.iter().enumerate() {
        let items = &ex.sequences[a];
        let kept = &items[items.len().saturating_sub(n)..];
        let table = p.get(&format!("embed.seq{a}"));
        let mut pooled = vec![0.0; d];
        for &i in kept {
            let e = table[i - 1].clone();
            for (acc, v) in pooled.iter_mut().zip(p.linear(&e, "phi_seq")) {
                *acc += v;
            }
            s.push(e);
            mask.push(true);
        }
        for _ in kept.len()..n {
            s.push(vec![0.0; d]);
            mask.push(false);
        }
        sp.push(pooled);
    }
    State {
        c,
        cp,
        s,
        sp,
        t: p.get("task.tokens"),
        tp: p.get("task.shared"),
        mask,
    }
}

/// Full-mode prediction for one example: tokenize, every block, heads.
pub fn predict(
    store: &ParamStore<f64>,
    schema: &FeatureSchema,
    blocks: usize,
    ex: &Example,
) -> Vec<f64> {
    let p = Named(store);
    let mut st = tokenize(&p, schema, ex);
    for l in 0..blocks {
        st = block(&p, l, &st);
    }
    (0..schema.tasks())
        .map(|i| sigmoid(p.mlp(&st.t[i], &format!("head{i}"))[0]))
        .collect()
}

/// Clamped binary cross-entropy.
pub fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Batch mean of the weighted per-example task losses, looping over every
/// example and task.
pub fn multi_task_loss(probs: &[Vec<f64>], examples: &[&Example], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, ex) in probs.iter().zip(examples) {
        for t in 0..weights.len() {
            if ex.label_mask[t] {
                total += weights[t] * bce(p[t], ex.labels[t]);
            }
        }
    }
    total / probs.len() as f64
}

/// AUC by counting every positive/negative pair; ties earn half credit.
pub fn pairwise_auc(items: &[(f64, u8)]) -> Option<f64> {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for p in items.iter().filter(|x| x.1 == 1) {
        for n in items.iter().filter(|x| x.1 == 0) {
            pairs += 1.0;
            if p.0 > n.0 {
                credit += 1.0;
            } else if p.0 == n.0 {
                credit += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| credit / pairs)
}

/// Per-user pairwise AUC averaged over users with both classes.
pub fn pairwise_gauc(items: &[ScoredLabel<f64>], weighting: GaucWeighting) -> f64 {
    let mut users: Vec<&str> = items.iter().map(|i| i.user_id.as_str()).collect();
    users.sort();
    users.dedup();
    let (mut num, mut den) = (0.0, 0.0);
    for u in users {
        let g: Vec<(f64, u8)> = items
            .iter()
            .filter(|i| i.user_id == u)
            .map(|i| (i.score, i.label))
            .collect();
        if let Some(a) = pairwise_auc(&g) {
            let w = match weighting {
                GaucWeighting::Impressions => g.len() as f64,
                GaucWeighting::Uniform => 1.0,
            };
            num += w * a;
            den += w;
        }
    }
    num / den
}
