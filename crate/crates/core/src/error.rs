use thiserror::Error;

/// Failures raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {0:?} lies outside the domain")]
    Domain([f64; 3]),
    #[error("system is not simple: {0}")]
    NonSimple(String),
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("solver refused: {0}")]
    Refused(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("expression error at {pos}: {msg}")]
    Expr { pos: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
