use thiserror::Error;

/// Errors produced anywhere in the training and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of a function.
    #[error("domain error in {func}: {detail}")]
    Domain { func: &'static str, detail: String },

    /// A caller broke a precondition (dimension mismatch, empty input, wrong task).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative routine failed or a non-finite value appeared.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// Malformed or unusable input data.
    #[error("input error: {0}")]
    Input(String),

    /// Every candidate of the training protocol failed.
    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(func: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { func, detail: detail.into() }
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical { context: context.into(), detail: detail.into() }
    }
}
