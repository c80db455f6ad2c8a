use std::path::PathBuf;

use crate::data::idx::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad index, dimension or length passed to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// A value violates the invariants of its type (simplex rows, finite params, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// An experiment or partition setup that cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// Config text error tied to a key and a 1-based line.
    #[error("config error at line {line}, key `{key}`: {message}")]
    ConfigKey {
        line: usize,
        key: String,
        message: String,
    },

    /// Evaluation outside the domain of a closed-form expression.
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("no convergence after {steps} steps (last residual {residual:e})")]
    NoConvergence { steps: usize, residual: f64 },

    #[error("training diverged at iteration {iteration}: non-finite parameters")]
    Diverged { iteration: usize },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::ConfigKey { .. }
            | Error::Domain(_) => 2,
            Error::NoConvergence { .. } | Error::Diverged { .. } => 3,
            Error::Idx(_) | Error::Io { .. } => 4,
        }
    }
}
