use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric: relative asymmetry {asymmetry:.3e} exceeds 1e-12")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (Cholesky failed)")]
    NotPositiveDefinite,

    #[error("matrix is near-singular: pivot {pivot:.3e} < 1e-14 * trace ({trace:.3e})")]
    NearSingular { pivot: f64, trace: f64 },

    #[error("degenerate weights{}: all zero or non-finite", step_suffix(*.step))]
    DegenerateWeights { step: Option<usize> },

    #[error("uniform draw {value} at position {index} is outside [0, 1)")]
    UniformOutOfRange { index: usize, value: f64 },

    #[error("resample index {index} out of range for {len} particles")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("oracle requires linear model")]
    NonLinearOracle,

    #[error("non-finite log-weight for particle {particle}{}", step_suffix(*.step))]
    NonFiniteLogWeight {
        particle: usize,
        step: Option<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at step {k}"),
        None => String::new(),
    }
}

impl Error {
    /// Attaches a step index to errors that carry one.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            Error::DegenerateWeights { .. } => Error::DegenerateWeights { step: Some(k) },
            Error::NonFiniteLogWeight { particle, .. } => Error::NonFiniteLogWeight {
                particle,
                step: Some(k),
            },
            other => other,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
