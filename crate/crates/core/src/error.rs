use std::path::PathBuf;

use thiserror::Error;

use crate::solver::SolveDiagnostics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no records")]
    NoRecords,

    #[error("validation error at record {row} (0-based): {message}")]
    Row { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no events observed{0}")]
    NoEvents(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("solver did not converge ({context}): {diagnostics}")]
    NotConverged { context: String, diagnostics: SolveDiagnostics },

    #[error("target time {time} outside grid 1..={max}")]
    TargetTime { time: usize, max: usize },

    #[error("logistic fit failed: {0}")]
    LogisticFit(String),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// Wraps the error with where it happened (arm, time form, ...).
    pub fn context(self, ctx: impl Into<String>) -> Self {
        let ctx = ctx.into();
        match self {
            Error::NotConverged { context, diagnostics } => Error::NotConverged {
                context: if context.is_empty() {
                    ctx
                } else {
                    format!("{ctx}: {context}")
                },
                diagnostics,
            },
            Error::Singular(m) => Error::Singular(format!("{ctx}: {m}")),
            Error::NoEvents(m) => Error::NoEvents(format!("{m} ({ctx})")),
            Error::LogisticFit(m) => Error::LogisticFit(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
