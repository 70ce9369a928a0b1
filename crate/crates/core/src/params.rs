//! Named parameter storage and the small dense layers built on it.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Replaces all values, checking names and shapes.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Schema("parameter names differ".into()));
        }
        for (name, (dst, src)) in self
            .names
            .iter()
            .zip(self.tensors.iter_mut().zip(&other.tensors))
        {
            if dst.shape() != src.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: src.shape().to_vec(),
                    expected: dst.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a [`ParamStore`], indexed by
/// [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform initializer with standard deviation `1/√d`.
pub struct Init {
    rng: ChaCha8Rng,
    bound: f64,
}

impl Init {
    pub fn new(rng: ChaCha8Rng, d: usize) -> Self {
        Init {
            rng,
            bound: (3.0 / d as f64).sqrt(),
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-self.bound, self.bound);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// Per-forward settings: dropout (training only) and optional attention
/// capture for inspection.
pub struct ForwardCtx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    pub(crate) block: usize,
    pub(crate) captures: Option<Vec<AttentionCapture>>,
}

/// Attention weights recorded during a forward pass, expanded to the full
/// key length (masked keys carry exact zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCapture {
    pub block: usize,
    pub flow: &'static str,
    /// queries × keys, averaged over heads.
    pub weights: Tensor<f64>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
            block: 0,
            captures: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng),
            block: 0,
            captures: None,
        }
    }

    pub fn capturing() -> Self {
        ForwardCtx {
            captures: Some(Vec::new()),
            ..Self::eval()
        }
    }

    pub fn take_captures(&mut self) -> Vec<AttentionCapture> {
        self.captures.take().unwrap_or_default()
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(&shape, mask)?);
        tape.mul(x, m)
    }
}

/// Affine map `x·W + b` on row vectors.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), init.uniform(&[fan_in, fan_out])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w))?;
        tape.add_row(h, p.var(self.b))
    }
}

/// One-hidden-layer perceptron: `relu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        width: usize,
        fan_out: usize,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, init, &format!("{name}.hidden"), fan_in, width),
            out: Linear::new(store, init, &format!("{name}.out"), width, fan_out),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h)?;
        self.out.forward(tape, p, h)
    }
}
