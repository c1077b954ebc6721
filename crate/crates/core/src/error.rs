use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A forward pass produced or received a non-finite value.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A placement strategy is undefined for the given backbone family.
    #[error("unsupported combination: {0}")]
    Unsupported(String),

    /// Two evaluations of a supposedly deterministic function disagreed.
    #[error("non-determinism detected in {0}")]
    NonDeterministic(&'static str),

    /// Training aborted because the loss or a gradient became non-finite.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("parse error in {context}: {detail}")]
    Parse { context: String, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
