use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("size mismatch for {what}: expected {expected}, got {actual}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-normalizable distribution: {0}")]
    NonNormalizable(String),

    #[error("complex target action not supported here: {0}")]
    ComplexTarget(&'static str),

    #[error("not enough samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: gradient norm {norm:e} exceeds ceiling {ceiling:e}")]
    Divergence { epoch: usize, norm: f64, ceiling: f64 },

    #[error("quadrature grid too large: {points:e} points (limit {limit:e})")]
    GridTooLarge { points: f64, limit: f64 },

    #[error("quadrature truncation check failed: |delta log Z| = {delta:e} > {tolerance:e}")]
    Truncation { delta: f64, tolerance: f64 },

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
