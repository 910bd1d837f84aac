use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be inverted is singular or too badly conditioned.
    #[error("singular design in {what}: condition number {condition:e}")]
    SingularDesign { what: String, condition: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn singular(what: impl Into<String>, condition: f64) -> Self {
        Error::SingularDesign {
            what: what.into(),
            condition,
        }
    }
}
