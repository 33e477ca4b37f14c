use std::path::PathBuf;

use bacl_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sibling generation infeasible for anchor {anchor} after {attempts} attempts (epsilon_gen = {epsilon_gen})")]
    Infeasible {
        anchor: usize,
        attempts: usize,
        epsilon_gen: f64,
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("not enough usable points for a fit: {found} < {needed}")]
    TooFewPoints { found: usize, needed: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure is a numerical blow-up rather than bad input.
    pub fn is_numerical_abort(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Numerics(NumericsError::NonFiniteResult { .. })
                | Error::Numerics(NumericsError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
