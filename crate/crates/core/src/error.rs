use thiserror::Error;

/// Errors raised by the modelling, optimization and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("optimizer input error: {0}")]
    OptimizerInput(String),

    #[error("all {restarts} restarts failed: {diagnostics:?}")]
    AllRestartsFailed {
        restarts: usize,
        diagnostics: Vec<String>,
    },

    #[error("fit failed on every restart: {diagnostics:?}")]
    Fit { diagnostics: Vec<String> },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("all bands removed by the exclusion ranges")]
    EmptyResult,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("r² undefined: {0}")]
    UndefinedMetric(String),

    #[error("trial {trial} failed: {diagnostics:?}")]
    Trial {
        trial: usize,
        diagnostics: Vec<String>,
    },

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical kind (factorization, optimization).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::AllRestartsFailed { .. }
                | Error::Fit { .. }
                | Error::OptimizerInput(_)
                | Error::Trial { .. }
                | Error::UndefinedMetric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
