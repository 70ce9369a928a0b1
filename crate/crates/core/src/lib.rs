//! INFNet: a task-aware information flow network for multi-task CTR
//! prediction, with a small reverse-mode autodiff tape, a synthetic data
//! generator, a trainer and evaluation metrics.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! trainer, checkpoints and CLI run in `f64`.

pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use features::{DataSchema, Example, FeatureSchema};
pub use model::{Ablation, InfNet, ModelConfig};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type InfNet32 = model::InfNet<f32>;
pub type InfNet64 = model::InfNet<f64>;
