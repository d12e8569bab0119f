use thiserror::Error;

/// Errors surfaced by the simulator, the network substrate and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("scheduler {id} out of range (have {count})")]
    UnknownScheduler { id: usize, count: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
