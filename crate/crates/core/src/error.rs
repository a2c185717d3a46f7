use thiserror::Error;

/// Every failure mode of the library. The CLI maps these onto exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("quadrature or expansion order {order} outside [{min}, {max}]")]
    OrderOutOfRange { order: usize, min: usize, max: usize },
    #[error("correlation {0} outside [-1, 1]")]
    RhoOutOfRange(f64),
    #[error("activation has degenerate second moment {0}")]
    DegenerateActivation(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel state became non-finite at layer {0}")]
    NonFiniteState(usize),
    #[error("zero variance before layer norm")]
    ZeroVariance,
    #[error("soft-cosine denominator vanishes")]
    ZeroDenominator,
    #[error("contract violated: {0}")]
    ContractViolation(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("layer norm input has zero spread at layer {0}")]
    LnZeroSigma(usize),
    #[error("Gram matrix is degenerate: lambda_min {lambda_min} <= {threshold}")]
    DegenerateGram { lambda_min: f64, threshold: f64 },
    #[error("dataset contains duplicate inputs at rows {0} and {1}")]
    DuplicateInputs(usize, usize),
    #[error("kernel is unbounded for architectures without layer norm")]
    UnboundedKernel,
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArch(_) | Error::OrderOutOfRange { .. } => 2,
            Error::DimensionMismatch { .. } | Error::RhoOutOfRange(_) => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
