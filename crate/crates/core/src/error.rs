use thiserror::Error;

/// Errors raised while building bases and model designs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("constant predictor: column `{0}` has max = min")]
    ConstantPredictor(String),

    #[error("basis exceeds data: {k} basis functions for {n} observations")]
    BasisExceedsData { k: usize, n: usize },

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },

    #[error("model spec declares {found} parameter blocks but family `{family}` has {expected}")]
    BlockCount {
        family: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("response value {y} at row {row} is outside the family's support")]
    InvalidResponse { row: usize, y: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// An observation fell outside the support of the distribution.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("observation outside support (index {index}, y = {y})")]
pub struct SupportError {
    pub index: usize,
    pub y: f64,
}

/// Failures of the penalized Newton solver.
#[derive(Debug, Error, Clone)]
pub enum SolveError {
    #[error("starting values lie outside the support: {0}")]
    InfeasibleStart(SupportError),

    #[error("no convergence after {iterations} Newton iterations (|U_P|inf = {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best_beta: Vec<f64>,
    },

    #[error("step halving stalled after {halvings} halvings (|U_P|inf = {grad_norm:e})")]
    Stalled {
        halvings: usize,
        grad_norm: f64,
        best_beta: Vec<f64>,
    },

    #[error("model fully unidentifiable")]
    Unidentifiable,

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl SolveError {
    /// The best coefficient vector reached before failure, when one exists.
    pub fn best_beta(&self) -> Option<&[f64]> {
        match self {
            SolveError::NonConvergence { best_beta, .. } | SolveError::Stalled { best_beta, .. } => Some(best_beta),
            _ => None,
        }
    }
}

/// Failures of the outer smoothing-parameter iteration.
#[derive(Debug, Error, Clone)]
pub enum FitError {
    #[error("inner fit failed at outer iteration {outer}: {source}")]
    Solve {
        outer: usize,
        #[source]
        source: SolveError,
    },

    #[error("invalid curvature c = {c} for smoothing parameter {j}")]
    InvalidCurvature { j: usize, c: f64 },

    #[error("smoothing parameters did not converge within {iterations} outer iterations")]
    NonConvergence {
        iterations: usize,
        /// Fit at the last smoothing parameters reached, with its trajectory.
        best: Box<crate::em::FitResult>,
    },

    #[error(transparent)]
    Design(#[from] DesignError),
}
