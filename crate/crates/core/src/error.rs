use std::path::PathBuf;

use thiserror::Error;

/// One invalid field found while validating an input row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldError {
    /// 1-based data row (header excluded); `None` for single-record validation.
    pub row: Option<usize>,
    pub column: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.row {
            Some(row) => write!(f, "row {row}, column {}: {}", self.column, self.message),
            None => write!(f, "{}: {}", self.column, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("validation failed with {} problem(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<FieldError>),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("endpoint `{0}` has no observed events")]
    AllCensored(String),

    #[error("bundle format version {found} is not supported (expected {expected})")]
    BundleVersion { found: u32, expected: u32 },

    #[error("bundle digest mismatch: stored {stored}, computed {computed}")]
    BundleDigest { stored: String, computed: String },

    #[error("malformed bundle: {0}")]
    BundleFormat(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn summarize(errors: &[FieldError]) -> String {
    let shown: Vec<String> = errors.iter().take(5).map(|e| e.to_string()).collect();
    let mut out = shown.join("; ");
    if errors.len() > 5 {
        out.push_str(&format!("; ... and {} more", errors.len() - 5));
    }
    out
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
