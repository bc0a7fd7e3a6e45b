use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error("near-singular gain at layer {layer}: denominator {denominator:e}")]
    NearSingularGain { layer: usize, denominator: f64 },

    #[error("singular statistics: {0}")]
    Singular(String),

    #[error("rank-deficient mixing matrix: {0}")]
    RankDeficient(String),

    #[error("values from different tapes cannot be mixed")]
    CrossTape,

    #[error("tape exceeded its node cap of {0}")]
    TapeCap(usize),

    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
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

    /// True for failures caused by the numbers rather than the inputs' shape
    /// or the environment.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. }
            | Error::NearSingularGain { .. }
            | Error::Singular(_)
            | Error::RankDeficient(_)
            | Error::Degenerate(_) => true,
            Error::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
