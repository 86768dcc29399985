use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is numerically singular (condition estimate {condition:.3e})")]
    SingularMatrix { condition: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("symmetric eigensolver did not converge after {sweeps} sweeps")]
    SingularFactor { sweeps: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("ODE solve exceeded {max_steps} steps at t = {t}")]
    MaxStepsExceeded { max_steps: usize, t: f64 },

    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("invalid class label {label} for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("invalid interval or grid: {0}")]
    BadInterval(String),

    #[error("non-finite horizon update")]
    NonFiniteUpdate,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Training { source, .. } => source.is_numeric(),
            Error::Config(_) | Error::BadLabel { .. } | Error::DimensionMismatch { .. } => false,
            _ => true,
        }
    }
}
