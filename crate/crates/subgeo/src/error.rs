use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("rate is not subgeometric: ratio still above delta at n = {0}")]
    NotSubgeometric(u64),
    #[error("minorisation violated at state {state}: residual mass {mass} at column {col}")]
    Minorisation { state: usize, col: usize, mass: f64 },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("non-finite constant `{name}`: {detail}")]
    NonFinite { name: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
