use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Ground-truth eye landmarks coincide, so NME has no scale.
    #[error("degenerate normalization distance (inter-ocular distance is zero)")]
    DegenerateNormalization,

    /// A forward pass produced a non-finite value.
    #[error("numerical abort at epoch {epoch}, step {step}: first non-finite value produced by node #{node} ({op})")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        node: usize,
        op: String,
    },

    #[error("parse error in {source_name}:{line}: {detail}")]
    Parse {
        source_name: String,
        line: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::NumericalAbort { .. } => 3,
            _ => 1,
        }
    }
}
