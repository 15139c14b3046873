use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported schema version {found:?}, expected {expected:?}")]
    SchemaVersion { found: String, expected: String },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("compromised-user budget is empty: floor({rho} * {users}) = 0")]
    BudgetTooSmall { rho: f64, users: usize },

    #[error("no benign test users to evaluate")]
    NoEvaluationUsers,

    #[error("unknown name {0:?} in ordering chain")]
    MissingName(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("seed {seed}, stage {stage}: {source}")]
    Stage {
        seed: u64,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, seed: u64, stage: &'static str) -> Self {
        Self::Stage {
            seed,
            stage,
            source: Box::new(self),
        }
    }
}
