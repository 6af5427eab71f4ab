use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix of size {size} is not positive definite (jitter escalated to {jitter:e})")]
    NotPositiveDefinite { size: usize, jitter: f64 },

    #[error("empty data set")]
    EmptyData,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("size guard: {what} = {value} exceeds limit {limit}")]
    SizeGuard {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("numeric failure at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<GpError>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<GpError>,
    },

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

    #[error("data format: {0}")]
    Format(String),

    #[error("plot: {0}")]
    Plot(String),
}

impl GpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        GpError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a numerical failure (factorization or
    /// a degenerate density), as opposed to bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            GpError::NotPositiveDefinite { .. } | GpError::Domain(_) => true,
            GpError::Training { source, .. } | GpError::Context { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(GpError::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}
