use thiserror::Error;

/// Errors produced by the simulator, analytics and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("site index {site} outside array of length {length}")]
    InvalidSite { site: usize, length: usize },

    #[error("Hilbert space dimension {requested} exceeds budget {budget}")]
    DimensionOverflow { requested: u128, budget: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operator is not Hermitian")]
    NotHermitian,

    #[error("Krylov propagation did not converge: residual {residual:e} > tolerance {tolerance:e}")]
    KrylovNonConvergence { residual: f64, tolerance: f64 },

    #[error("time step too large: total jump probability {probability} per step")]
    StepTooLarge { probability: f64 },

    #[error("rate sits exactly on the exceptional point; perturb the input")]
    ExceptionalPoint,

    #[error("decay time is unbounded for a vanishing rate")]
    Unbounded,

    #[error("vanishing intermediate detuning at site {site}: degenerate perturbation regime")]
    DegenerateDetuning { site: usize },

    #[error("root finder did not converge")]
    RootNotFound,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("dense master equation needs dimension {dimension} which exceeds budget {budget}")]
    DenseBudgetExceeded { dimension: usize, budget: usize },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("exponential fit failed: {0}")]
    Fit(String),

    #[error("result table is empty")]
    EmptyTable,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the command line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Fit,
    Config,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Fit => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Io => 1,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Fit(_) => ErrorCategory::Fit,
            Error::InvalidParameter(_)
            | Error::InvalidSite { .. }
            | Error::Config(_)
            | Error::Unsupported(_)
            | Error::EmptyTable
            | Error::DimensionOverflow { .. }
            | Error::DenseBudgetExceeded { .. } => ErrorCategory::Config,
            Error::Io(_) | Error::Serialization(_) => ErrorCategory::Io,
            Error::Trajectory { source, .. } => source.category(),
            _ => ErrorCategory::Numeric,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
