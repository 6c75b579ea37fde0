use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("exterior empty: the domain covers every grid node")]
    ExteriorEmpty,

    #[error("grid mismatch between operands")]
    GridMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("combinatorial overflow: |alpha| = {0} exceeds the supported bound")]
    Overflow(usize),

    #[error("loss of coercivity: q = {value:e} < 0 at node {node}")]
    LossOfCoercivity { node: usize, value: f64 },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("contraction ball violated: |v|_inf = {norm:e} > delta = {delta:e} at iteration {iteration}")]
    ContractionBallViolated { iteration: usize, norm: f64, delta: f64 },

    #[error("size cap exceeded: {0} interior unknowns")]
    SizeCap(usize),

    #[error("missing prerequisite w_beta for beta = {0}")]
    MissingPrerequisite(String),

    #[error("insufficient localization: {0}")]
    InsufficientLocalization(String),

    #[error("error budget {budget:e} exceeds ceiling {ceiling:e} at {stage}")]
    BudgetExceeded { stage: String, budget: f64, ceiling: f64 },

    #[error("measurement unavailable: {0}")]
    MissingMeasurement(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
