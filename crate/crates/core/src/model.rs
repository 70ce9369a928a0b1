//! The assembled network: tokenization, block stack and heads over a single
//! parameter store.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{stack_forward, BlockDims, BlockParams, BlockState};
use crate::error::{Error, Result};
use crate::features::{init_task_tokens, tokenize, EmbeddingTables, Example, FeatureSchema};
use crate::heads::{multi_task_loss, predict_from_state, Heads};
use crate::params::{AttentionCapture, Bound, ForwardCtx, Init, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// Component-removal variants used for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    #[default]
    Full,
    /// w/o1: no task tokens; heads read the categorical/sequence proxies.
    NoTaskTokens,
    /// w/o2: every proxy gated unit is the identity.
    NoHomogeneous,
    /// w/o3: every cross-attention output is zero.
    NoHeterogeneous,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoTaskTokens,
        Ablation::NoHomogeneous,
        Ablation::NoHeterogeneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTaskTokens => "wo1",
            Ablation::NoHomogeneous => "wo2",
            Ablation::NoHeterogeneous => "wo3",
        }
    }

    pub fn task_tokens(self) -> bool {
        self != Ablation::NoTaskTokens
    }

    pub fn homogeneous(self) -> bool {
        self != Ablation::NoHomogeneous
    }

    pub fn heterogeneous(self) -> bool {
        self != Ablation::NoHeterogeneous
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "wo1" | "no_task_tokens" => Ok(Ablation::NoTaskTokens),
            "wo2" | "no_homogeneous" => Ok(Ablation::NoHomogeneous),
            "wo3" | "no_heterogeneous" => Ok(Ablation::NoHeterogeneous),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected full, wo1, wo2 or wo3)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Query/key width; defaults to d.
    pub d_k: Option<usize>,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 2,
            heads: 1,
            d_k: None,
            ablation: Ablation::Full,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed: EmbeddingTables,
    blocks: Vec<BlockParams>,
    heads: Heads,
}

/// Output of one example's forward pass.
pub struct Forward {
    /// N_task×1 probabilities.
    pub probs: Var,
    pub state: BlockState,
}

#[derive(Clone, Debug)]
pub struct InfNet<T> {
    schema: FeatureSchema,
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> InfNet<T> {
    pub fn new(schema: FeatureSchema, config: ModelConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        if config.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        let dims = Self::dims_for(&schema, &config);
        dims.validate()?;

        let mode = config.ablation;
        let mut params = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed), schema.d);
        let task_tokens = mode
            .task_tokens()
            .then(|| init_task_tokens(&schema, seed ^ 0x7461_736b));
        let embed = EmbeddingTables::new(&mut params, &mut init, &schema, task_tokens);
        let blocks = (0..config.blocks)
            .map(|l| {
                BlockParams::new(
                    &mut params,
                    &mut init,
                    l,
                    &dims,
                    mode.heterogeneous(),
                    mode.homogeneous(),
                    mode.task_tokens(),
                )
            })
            .collect();
        let readout_in = (!mode.task_tokens())
            .then_some((schema.cat_proxies + schema.data.num_behaviors()) * schema.d);
        let heads = Heads::new(&mut params, &mut init, schema.tasks(), schema.d, readout_in);
        Ok(InfNet {
            schema,
            config,
            params,
            layout: Layout {
                embed,
                blocks,
                heads,
            },
        })
    }

    fn dims_for(schema: &FeatureSchema, config: &ModelConfig) -> BlockDims {
        BlockDims {
            d: schema.d,
            d_k: config.d_k.unwrap_or(schema.d),
            heads: config.heads,
            cat_proxies: schema.cat_proxies,
            behaviors: schema.data.num_behaviors(),
            tasks: schema.tasks(),
            shared: schema.shared_task_tokens,
        }
    }

    pub fn dims(&self) -> BlockDims {
        Self::dims_for(&self.schema, &self.config)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embeddings(&self) -> &EmbeddingTables {
        &self.layout.embed
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.layout.blocks
    }

    pub fn heads(&self) -> &Heads {
        &self.layout.heads
    }

    /// Layer-0 tokens for one example.
    pub fn tokenize(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ex: &Example,
        ctx: &mut ForwardCtx,
    ) -> Result<BlockState> {
        tokenize(tape, p, &self.layout.embed, &self.schema, ex, ctx)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ex: &Example,
        ctx: &mut ForwardCtx,
    ) -> Result<Forward> {
        let state0 = self.tokenize(tape, p, ex, ctx)?;
        let state = stack_forward(tape, p, &self.layout.blocks, state0, self.config.heads, ctx)?;
        let probs = predict_from_state(tape, p, &self.layout.heads, &state, ctx)?;
        Ok(Forward { probs, state })
    }

    /// Mean weighted multi-task loss over `batch`, recorded on `tape`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &[&Example],
        task_weights: &[T],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut probs = Vec::with_capacity(batch.len());
        for ex in batch {
            probs.push(self.forward(tape, p, ex, ctx)?.probs);
        }
        multi_task_loss(tape, &probs, batch, task_weights)
    }

    /// Evaluation-mode probabilities for one example.
    pub fn predict(&self, ex: &Example) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &p, ex, &mut ForwardCtx::eval())?;
        Ok(tape.value(out.probs).data().to_vec())
    }

    /// Evaluation-mode probabilities for many examples, binding the
    /// parameters once.
    pub fn predict_batch<'a>(
        &self,
        examples: impl IntoIterator<Item = &'a Example>,
    ) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let base = tape.len();
        let mut ctx = ForwardCtx::eval();
        let mut out = Vec::new();
        for ex in examples {
            let f = self.forward(&mut tape, &p, ex, &mut ctx)?;
            out.push(tape.value(f.probs).data().to_vec());
            tape.truncate(base);
        }
        Ok(out)
    }

    /// Attention weights of every cross-attention instance for one example.
    pub fn attention(&self, ex: &Example) -> Result<Vec<AttentionCapture>> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let mut ctx = ForwardCtx::capturing();
        self.forward(&mut tape, &p, ex, &mut ctx)?;
        Ok(ctx.take_captures())
    }

    fn bind_constants(&self, tape: &mut Tape<T>) -> Bound {
        Bound::from_vars(
            self.params
                .tensors()
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        )
    }

    /// The same network under another ablation mode. Parameters that exist
    /// in both layouts keep their values; new ones are freshly initialized.
    pub fn with_ablation(&self, mode: Ablation, seed: u64) -> Result<Self> {
        if mode == self.config.ablation {
            return Ok(self.clone());
        }
        let config = ModelConfig {
            ablation: mode,
            ..self.config.clone()
        };
        let mut out = InfNet::new(self.schema.clone(), config, seed)?;
        for id in out.params.ids().collect::<Vec<_>>() {
            let name = out.params.name(id).to_string();
            if let Some(src) = self.params.find(&name) {
                *out.params.get_mut(id) = self.params.get(src).clone();
            }
        }
        Ok(out)
    }
}
