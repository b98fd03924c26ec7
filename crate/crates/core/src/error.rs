use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid signal parameters: {0}")]
    InvalidParams(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("covariance rejected: {0}")]
    InvalidCovariance(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector is not unit norm (norm = {0})")]
    NotUnitNorm(f64),

    #[error("degenerate direction: norm {0:e} after projection, resample required")]
    Degenerate(f64),

    #[error("no informative CCA optimum: reference vector is an eigenvector of V")]
    DegenerateCca,

    #[error("inconsistent moments: {0}")]
    InconsistentMoments(String),

    #[error("invalid detection spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by the caller's configuration rather than by a
    /// failure while running.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Csv(_) | Error::Json(_))
    }
}
