use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// Each variant maps onto one stable category string (see [`Error::category`])
/// which the command-line front end prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset specification: {0}")]
    InvalidSpec(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: u64, loss: f64 },

    #[error("no specialist for source {0}")]
    MissingSpecialist(u16),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptyInput(_) => "empty-input",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non-finite",
            Error::Config(_) => "config",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::Stratification(_) => "stratification",
            Error::Sampling(_) => "sampling",
            Error::Divergence { .. } => "divergence",
            Error::MissingSpecialist(_) => "missing-specialist",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
