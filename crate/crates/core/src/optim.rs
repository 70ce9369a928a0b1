//! Adam and Adagrad over a flat list of parameter tensors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adagrad,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            _ => Err(Error::Config(format!(
                "unknown optimizer `{s}` (expected adam or adagrad)"
            ))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-10;

/// Optimizer state. `first` holds Adam's first moments (unused by Adagrad);
/// `second` holds Adam's second moments or Adagrad's squared-gradient sums.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T, params: &[Tensor<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![T::zero(); p.len()])
                .collect::<Vec<_>>()
        };
        Optimizer {
            kind,
            lr,
            step: 0,
            first: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            second: zeros(),
        }
    }

    /// One update. `grads[i]` must match `params[i]` in length.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.second.len() {
            return Err(Error::Shape {
                op: "optimizer step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => self.adam(params, grads),
            OptimizerKind::Adagrad => self.adagrad(params, grads),
        }
        Ok(())
    }

    fn adam(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    fn adagrad(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        let eps = T::lit(ADAGRAD_EPS);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let acc = &mut self.second[k];
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g).enumerate() {
                acc[i] += gi * gi;
                *w -= self.lr * gi / (acc[i].sqrt() + eps);
            }
        }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(T::zero(), |acc, &x| acc + x * x)
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= s;
        }
    }
    norm
}
