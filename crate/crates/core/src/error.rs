use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (asymmetry {asym:e} vs norm {norm:e})")]
    NotSymmetric { asym: f64, norm: f64 },

    #[error("matrix is indefinite (lambda_min {lambda_min:e}, scale {scale:e})")]
    Indefinite { lambda_min: f64, scale: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{0} did not converge")]
    NoConvergence(&'static str),

    #[error("convergence radius undefined: eps*sqrt(2*phi) = {lhs:e} >= beta = {beta:e}")]
    NoConvergenceGuarantee { lhs: f64, beta: f64 },

    #[error("degenerate Charnes-Cooper solution: gamma = {0:e}")]
    DegenerateSolution(f64),

    #[error("placement problem infeasible: {0}")]
    Infeasible(String),

    #[error("search space too large: {count} candidates exceeds limit {limit}")]
    SearchTooLarge { count: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
