//! Tokenization of a raw example into categorical, sequence and task tokens
//! plus their proxies (layer 0 of the block stack).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::BlockState;
use crate::error::{Error, Result};
use crate::params::{Bound, ForwardCtx, Init, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Input structure shared by datasets and models: categorical field
/// cardinalities, per-behavior sequence lengths and vocabularies, task count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSchema {
    pub cards: Vec<usize>,
    pub lens: Vec<usize>,
    pub vocabs: Vec<usize>,
    pub tasks: usize,
}

impl DataSchema {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.cards.is_empty() {
            return bad("at least one categorical field is required".into());
        }
        if self.lens.is_empty() {
            return bad("at least one behavior sequence is required".into());
        }
        if self.lens.len() != self.vocabs.len() {
            return bad(format!(
                "{} sequence lengths but {} vocabularies",
                self.lens.len(),
                self.vocabs.len()
            ));
        }
        if self.tasks == 0 {
            return bad("at least one task is required".into());
        }
        if self
            .cards
            .iter()
            .chain(&self.lens)
            .chain(&self.vocabs)
            .any(|&x| x == 0)
        {
            return bad("cardinalities, lengths and vocabularies must be positive".into());
        }
        Ok(())
    }

    /// M, the number of categorical fields.
    pub fn num_fields(&self) -> usize {
        self.cards.len()
    }

    /// F, the number of behavior sequence types.
    pub fn num_behaviors(&self) -> usize {
        self.lens.len()
    }

    /// L, the padded total sequence length.
    pub fn total_len(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Offset of each behavior block inside the concatenated sequence.
    pub fn block_offsets(&self) -> Vec<usize> {
        self.lens
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect()
    }
}

/// Full feature schema: input structure plus embedding width and proxy
/// counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSchema {
    pub data: DataSchema,
    /// Embedding dimension d.
    pub d: usize,
    /// Categorical proxy count m.
    pub cat_proxies: usize,
    /// Shared task token count N_s.
    pub shared_task_tokens: usize,
}

impl FeatureSchema {
    pub const DEFAULT_CAT_PROXIES: usize = 4;
    pub const DEFAULT_SHARED_TASK_TOKENS: usize = 2;

    pub fn new(data: DataSchema, d: usize) -> Self {
        FeatureSchema {
            data,
            d,
            cat_proxies: Self::DEFAULT_CAT_PROXIES,
            shared_task_tokens: Self::DEFAULT_SHARED_TASK_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.d == 0 || self.cat_proxies == 0 || self.shared_task_tokens == 0 {
            return Err(Error::Schema(
                "d, categorical proxy count and shared task token count must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.data.tasks
    }
}

/// One labeled interaction. Categorical values and item ids are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user_id: String,
    pub categorical: Vec<usize>,
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
    pub label_mask: Vec<bool>,
}

impl Example {
    pub fn validate(&self, schema: &DataSchema) -> Result<()> {
        if self.categorical.len() != schema.num_fields() {
            return Err(Error::Schema(format!(
                "expected {} categorical values, got {}",
                schema.num_fields(),
                self.categorical.len()
            )));
        }
        if self.sequences.len() != schema.num_behaviors() {
            return Err(Error::Schema(format!(
                "expected {} sequences, got {}",
                schema.num_behaviors(),
                self.sequences.len()
            )));
        }
        if self.labels.len() != schema.tasks || self.label_mask.len() != schema.tasks {
            return Err(Error::Schema(format!(
                "expected {} labels and mask entries, got {} and {}",
                schema.tasks,
                self.labels.len(),
                self.label_mask.len()
            )));
        }
        for (j, (&v, &card)) in self.categorical.iter().zip(&schema.cards).enumerate() {
            if v == 0 || v > card {
                return Err(Error::Index {
                    what: "categorical value",
                    field: j + 1,
                    index: v,
                    max: card,
                });
            }
        }
        for (a, (items, &vocab)) in self.sequences.iter().zip(&schema.vocabs).enumerate() {
            if let Some(&bad) = items.iter().find(|&&i| i == 0 || i > vocab) {
                return Err(Error::Index {
                    what: "sequence item",
                    field: a + 1,
                    index: bad,
                    max: vocab,
                });
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Schema(format!("label {l} is not 0 or 1")));
        }
        Ok(())
    }

    /// The items of behavior `a` that survive truncation (the most recent
    /// `n_a`, i.e. the tail of the list).
    pub fn kept_items<'a>(&'a self, a: usize, schema: &DataSchema) -> &'a [usize] {
        let items = &self.sequences[a];
        let n = schema.lens[a];
        &items[items.len().saturating_sub(n)..]
    }

    /// Per-position mask of the padded sequence matrix.
    pub fn seq_mask(&self, schema: &DataSchema) -> Vec<bool> {
        let mut mask = Vec::with_capacity(schema.total_len());
        for a in 0..schema.num_behaviors() {
            let k = self.kept_items(a, schema).len();
            mask.extend((0..schema.lens[a]).map(|t| t < k));
        }
        mask
    }
}

/// Value snapshot of the six token matrices of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub c: Tensor<T>,
    pub c_proxy: Tensor<T>,
    pub s: Tensor<T>,
    pub s_proxy: Tensor<T>,
    pub t: Option<Tensor<T>>,
    pub t_proxy: Option<Tensor<T>>,
    pub seq_mask: Vec<bool>,
}

/// Parameter handles for tokenization.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub cat: Vec<ParamId>,
    pub seq: Vec<ParamId>,
    pub phi_cat: Mlp,
    pub phi_seq: Linear,
    /// Task tokens T and shared task tokens T̃; absent without task tokens.
    pub task: Option<(ParamId, ParamId)>,
}

impl EmbeddingTables {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        schema: &FeatureSchema,
        task_tokens: Option<(Tensor<T>, Tensor<T>)>,
    ) -> Self {
        let d = schema.d;
        let cat = schema
            .data
            .cards
            .iter()
            .enumerate()
            .map(|(j, &v)| store.add(format!("embed.cat{j}"), init.uniform(&[v, d])))
            .collect();
        let seq = schema
            .data
            .vocabs
            .iter()
            .enumerate()
            .map(|(a, &w)| store.add(format!("embed.seq{a}"), init.uniform(&[w, d])))
            .collect();
        let md = schema.cat_proxies * d;
        let phi_cat = Mlp::new(store, init, "phi_cat", schema.data.num_fields() * d, md, md);
        let phi_seq = Linear::new(store, init, "phi_seq", d, d);
        let task =
            task_tokens.map(|(t, tp)| (store.add("task.tokens", t), store.add("task.shared", tp)));
        EmbeddingTables {
            cat,
            seq,
            phi_cat,
            phi_seq,
            task,
        }
    }
}

/// C: row j is row `v_j` of field j's table.
pub fn embed_categorical<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    tables: &EmbeddingTables,
    ex: &Example,
    schema: &DataSchema,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(schema.num_fields());
    for (j, (&v, &card)) in ex.categorical.iter().zip(&schema.cards).enumerate() {
        if v == 0 || v > card {
            return Err(Error::Index {
                what: "categorical value",
                field: j + 1,
                index: v,
                max: card,
            });
        }
        rows.push(tape.select_rows(p.var(tables.cat[j]), &[v - 1])?);
    }
    tape.concat_rows(&rows)
}

/// C̃ = reshape(φ_cat(flatten(C))) with m rows.
pub fn build_categorical_proxies<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    phi_cat: &Mlp,
    c: Var,
    m: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let n = tape.value(c).len();
    let d = tape.value(c).cols();
    let flat = tape.flatten(c);
    let row = tape.reshape(flat, &[1, n])?;
    let out = phi_cat.forward(tape, p, row, ctx)?;
    tape.reshape(out, &[m, d])
}

/// S (L×d) and its real-token mask. Each behavior keeps its most recent
/// `n_a` items and is right-padded with zero rows.
pub fn embed_sequences<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    tables: &EmbeddingTables,
    ex: &Example,
    schema: &DataSchema,
    d: usize,
) -> Result<(Var, Vec<bool>)> {
    let mut parts = Vec::new();
    let mut pad = 0;
    for a in 0..schema.num_behaviors() {
        let kept = ex.kept_items(a, schema);
        if let Some(&bad) = kept.iter().find(|&&i| i == 0 || i > schema.vocabs[a]) {
            return Err(Error::Index {
                what: "sequence item",
                field: a + 1,
                index: bad,
                max: schema.vocabs[a],
            });
        }
        if !kept.is_empty() {
            if pad > 0 {
                parts.push(tape.constant(Tensor::zeros(&[pad, d])));
                pad = 0;
            }
            let rows: Vec<usize> = kept.iter().map(|&i| i - 1).collect();
            parts.push(tape.select_rows(p.var(tables.seq[a]), &rows)?);
        }
        pad += schema.lens[a] - kept.len();
    }
    if pad > 0 {
        parts.push(tape.constant(Tensor::zeros(&[pad, d])));
    }
    let s = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    Ok((s, ex.seq_mask(schema)))
}

/// S̃: row a is Σ φ_seq(s) over the real tokens of behavior a; a behavior
/// with no real tokens yields a zero row.
pub fn build_sequence_proxies<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    phi_seq: &Linear,
    s: Var,
    seq_mask: &[bool],
    schema: &DataSchema,
) -> Result<Var> {
    let d = tape.value(s).cols();
    let mut rows = Vec::with_capacity(schema.num_behaviors());
    for (a, off) in schema.block_offsets().into_iter().enumerate() {
        let real = seq_mask[off..off + schema.lens[a]]
            .iter()
            .take_while(|&&m| m)
            .count();
        if real == 0 {
            rows.push(tape.constant(Tensor::zeros(&[1, d])));
            continue;
        }
        let block = tape.slice_rows(s, off, real)?;
        let proj = phi_seq.forward(tape, p, block)?;
        rows.push(tape.sum_rows(proj)?);
    }
    tape.concat_rows(&rows)
}

/// Learnable task tokens T (N_task×d) and shared task tokens T̃ (N_s×d),
/// drawn from the global initializer with a dedicated seed.
pub fn init_task_tokens<T: Real>(schema: &FeatureSchema, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed), schema.d);
    let t = init.uniform(&[schema.tasks(), schema.d]);
    let tp = init.uniform(&[schema.shared_task_tokens, schema.d]);
    (t, tp)
}

/// Builds the layer-0 block state for one example.
pub fn tokenize<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    tables: &EmbeddingTables,
    schema: &FeatureSchema,
    ex: &Example,
    ctx: &mut ForwardCtx,
) -> Result<BlockState> {
    let c = embed_categorical(tape, p, tables, ex, &schema.data)?;
    let c_proxy = build_categorical_proxies(tape, p, &tables.phi_cat, c, schema.cat_proxies, ctx)?;
    let (s, seq_mask) = embed_sequences(tape, p, tables, ex, &schema.data, schema.d)?;
    let s_proxy = build_sequence_proxies(tape, p, &tables.phi_seq, s, &seq_mask, &schema.data)?;
    let (t, t_proxy) = match tables.task {
        Some((t, tp)) => (Some(p.var(t)), Some(p.var(tp))),
        None => (None, None),
    };
    Ok(BlockState {
        c,
        c_proxy,
        s,
        s_proxy,
        t,
        t_proxy,
        t_hat: None,
        seq_mask,
    })
}
