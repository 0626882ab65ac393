use thiserror::Error;

/// Errors raised by the numerics, loss and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape state: {0}")]
    TapeState(String),

    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
