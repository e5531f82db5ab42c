use thiserror::Error;

/// Errors raised by the tensor engine, kernels, models and tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("degenerate read at position {position}: |denominator| = {denominator:e} < 1e-9")]
    DegenerateRead { position: usize, denominator: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (window {window}, lr {lr:e})")]
    NonFiniteLoss { step: usize, window: usize, lr: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus source exhausted after {0} tokens")]
    CorpusExhausted(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
