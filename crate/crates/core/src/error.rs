use thiserror::Error;

/// Errors raised by the sampler, its models and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("block index {index} out of range ({count} blocks)")]
    BlockOutOfRange { index: usize, count: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("chain diverged at step {step} (eta = {eta:e}): {reason}")]
    Divergence { step: u64, eta: f64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
