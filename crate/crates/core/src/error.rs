use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("{what} index {index} out of range 1..={max} (field {field})")]
    Index {
        what: &'static str,
        field: usize,
        index: usize,
        max: usize,
    },

    #[error("schema: {0}")]
    Schema(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: {source}")]
    Record {
        path: String,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("no training signal: every task label is masked in the batch")]
    NoSignal,

    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 divergence, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointShape { .. } | Error::CheckpointVersion { .. } => 2,
            Error::Divergence { .. } => 4,
            Error::Io { .. } | Error::CorruptCheckpoint(_) => 5,
            _ => 3,
        }
    }
}
