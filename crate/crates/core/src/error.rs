use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("gradient implemented for p=2 only (got p={0})")]
    UnsupportedExponent(f64),

    #[error("covariance not SPD: leading minor {index} is not positive (pivot {pivot:e})")]
    NotSpd { index: usize, pivot: f64 },

    #[error("coefficient overflow: exp(m) is not finite at node {node} (m = {value})")]
    CoefficientOverflow { node: usize, value: f64 },

    #[error("linear solver breakdown: {0}")]
    SolverBreakdown(String),

    #[error("load-bus voltage collapse (x12 = x15 = 0)")]
    VoltageCollapse,

    #[error("Newton failed to converge after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence {
        iterations: usize,
        residual: f64,
        iterate: Box<[f64; 15]>,
    },

    #[error("non-finite objective or gradient: {0}")]
    NonFiniteObjective(String),

    #[error("non-finite function value while differencing coordinate {coordinate}")]
    NonFiniteDifference { coordinate: usize },

    #[error("infeasible bounds [{lo}, {hi}]")]
    InfeasibleBounds { lo: f64, hi: f64 },

    #[error("degenerate SSIM: zero variance with zero stabilizing constants")]
    DegenerateSsim,

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn mismatch(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }

    /// True for failures caused by bad input or configuration rather than a
    /// numerical solver.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::InvalidParameter(_)
                | Error::DimensionMismatch { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::EmptyEnsemble
                | Error::UnsupportedExponent(_)
                | Error::InfeasibleBounds { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
