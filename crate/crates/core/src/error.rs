use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the depth pipeline.
///
/// Every variant maps onto a short, stable category string (see
/// [`Error::category`]) so command-line front ends can emit a single
/// machine-parsable line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("gradient check harness: {0}")]
    Harness(String),

    #[error("weight load error for tensor `{name}`: {detail}")]
    Load { name: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite loss at step {step} (batch sample seeds {seeds:?})")]
    NonFiniteLoss { step: usize, seeds: Vec<u64> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Shape { .. } => "dimension",
            Error::NonFinite { .. } | Error::Numeric(_) => "numeric",
            Error::NonFiniteLoss { .. } => "nonfinite-loss",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Harness(_) => "harness",
            Error::Load { .. } => "load",
            Error::Format { .. } | Error::Json { .. } => "format",
            Error::Evaluation(_) => "evaluation",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
