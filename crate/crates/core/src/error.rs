use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (pivot {index} = {value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("linear system is singular (pivot {index})")]
    Singular { index: usize },

    /// The calibration constraints admit no positive semidefinite solution.
    /// `certificate` is a Farkas ray `y` with `Σ y_k A_k ⪯ 0` and `bᵀy > 0`.
    #[error("calibration is infeasible")]
    InfeasibleCalibration { certificate: Vec<f64> },

    #[error("objective is unbounded over the calibration set")]
    Unbounded,

    #[error("solver stopped without an optimal solution: {0}")]
    Solver(String),

    #[error("{0} is not available for this result")]
    NotAvailable(&'static str),

    #[error("Newton operator E is numerically singular (min diagonal {min_diag:e}, regularization {regularization:e})")]
    SingularOperator { min_diag: f64, regularization: f64 },

    #[error("perturbation system is rank deficient (pivot {index})")]
    RankDeficientScenario { index: usize },

    #[error("instrument {index} has zero variance vega")]
    DegenerateVega { index: usize },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
