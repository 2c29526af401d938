use std::fmt;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("graph state error: {0}")]
    State(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),
    #[error("dense oracle refused: {0}")]
    OracleCap(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("missing {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Stable process exit codes for the command-line front end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    SelftestFailure = 1,
    Format = 2,
    Shape = 3,
    MissingDependency = 4,
    Divergence = 5,
}

impl Error {
    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::InvalidShape(msg.to_string())
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Maps an error onto the CLI exit-code contract.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Format(_) | Error::Io(_) => ExitCode::Format,
            Error::Missing(_) => ExitCode::MissingDependency,
            Error::Divergence { .. } => ExitCode::Divergence,
            Error::Stage { source, .. } => source.exit_code(),
            _ => ExitCode::Shape,
        }
    }
}
