use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimension too small: nx={nx}, ny={ny} (need at least 3 nodes per axis)")]
    GridTooSmall { nx: usize, ny: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("field must be strictly positive (min value {min})")]
    NonPositiveField { min: f64 },

    #[error("field contains non-finite entries")]
    NonFiniteField,

    #[error("linear solver did not converge: residual {residual} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("reduced system is singular or ill-conditioned (cond estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("singular matrix in {context}")]
    Singular { context: &'static str },

    #[error("Newton iteration diverged after {iterations} steps (residual {residual}); damping trace: {trace:?}")]
    NewtonDiverged {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("line search failed at iteration {iteration} (energy {energy})")]
    LineSearchFailed { iteration: usize, energy: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("zero-norm reference solution at sample {index}")]
    ZeroNormReference { index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("file format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("manifest validation failed: {0}")]
    ManifestInvalid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
