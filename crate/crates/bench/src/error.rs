use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Numeric {
        context: String,
        #[source]
        source: lqg_core::Error,
    },
    #[error("{what} {value:e} exceeds tolerance {tolerance:e}")]
    Tolerance { what: String, value: f64, tolerance: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl BenchError {
    /// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Numeric { .. } | BenchError::Tolerance { .. } => 3,
            BenchError::Io { .. } => 1,
        }
    }

    /// Attach `context` to a core error, sorting it into a configuration or
    /// numeric failure.
    pub fn from_core(context: impl Into<String>, err: lqg_core::Error) -> Self {
        use lqg_core::Error as E;
        match err {
            E::Dimension { .. } | E::Contract(_) | E::UnsupportedShape(_) | E::Checkpoint(_) => {
                BenchError::Config(format!("{}: {err}", context.into()))
            }
            E::Singular { .. } | E::Domain(_) | E::NonFinite { .. } => BenchError::Numeric {
                context: context.into(),
                source: err,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        BenchError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Shorthand for `map_err(|e| BenchError::from_core(context, e))`.
pub trait CoreContext<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> CoreContext<T> for lqg_core::Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| BenchError::from_core(context, e))
    }
}
