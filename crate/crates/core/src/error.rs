use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("value outside support: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("density is not normalized (integral = {0})")]
    Unnormalized(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("simulator failure at theta = {theta:?}: {reason}")]
    Simulator { theta: Vec<f64>, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Dimension { .. } => 2,
            Error::Simulator { .. } => 3,
            Error::NonFinite(_) | Error::Numerical(_) | Error::Unnormalized(_) => 4,
            Error::Archive(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
