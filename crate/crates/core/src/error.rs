use std::fmt;

use thiserror::Error;

/// A single reason a [`ModelConfig`](crate::ModelConfig) was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
    /// Hard violations cannot be downgraded by the override flag.
    pub hard: bool,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum QoeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid model configuration: {}", join_violations(.0))]
    Config(Vec<Violation>),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("model load error: {0}")]
    Load(String),
    #[error("training error: {message}")]
    Training {
        message: String,
        /// Per-epoch train losses recorded before the failure.
        history: Vec<f64>,
    },
    #[error("grid search error: {0}")]
    Search(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QoeError>;
