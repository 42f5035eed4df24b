use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up while differentiating.
    #[error("non-finite gradient at node {node}: {detail}")]
    Numeric { node: usize, detail: String },

    /// The matrix handed to the Cholesky factorization is not positive definite.
    #[error("decomposition failed: {0}")]
    Decomposition(String),

    /// A downstream estimator could not be fitted.
    #[error("fit failed in {stage}: {detail}")]
    Fit { stage: String, detail: String },

    /// A training loss became NaN or infinite.
    #[error("non-finite loss in phase {phase} at epoch {epoch}: {value}")]
    NonFiniteLoss { phase: u8, epoch: usize, value: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
