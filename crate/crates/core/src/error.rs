use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (schedule, network, training).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate diffusion step {t}: alpha_bar is zero")]
    DegenerateStep { t: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    /// Input data violates a domain invariant (e.g. unlabeled test record).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Contract(_)
                | Error::Manifest { .. }
                | Error::MissingFiles(_)
                | Error::Validation(_)
        )
    }
}
