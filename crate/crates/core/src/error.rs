use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("{op}: numeric domain error: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("singular matrix: |det W| = {det:e}")]
    Singular { det: f64 },

    #[error("degenerate statistics in channel {channel}: {detail}")]
    DegenerateStats { channel: usize, detail: String },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{}:{line}: {detail}", path.display())]
    Format { path: PathBuf, line: usize, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NumericDomain {
            op,
            detail: detail.into(),
        }
    }
}
