use thiserror::Error;

/// Errors raised across the crate. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum SoaError {
    #[error("input too short: {what} has length {len}, needs at least {min}")]
    InputTooShort { what: &'static str, len: usize, min: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown token {0:?}: not in the symbol inventory")]
    Vocabulary(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("infeasible CTC target: {frames} frames, at least {needed} needed")]
    InfeasibleTarget { frames: usize, needed: usize },

    #[error("data contract: {0}")]
    DataContract(String),

    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<SoaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SoaError>;

impl SoaError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SoaError::Contract(msg.into())
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        SoaError::Config { path: path.into(), msg: msg.into() }
    }

    /// Process exit code: 2 config, 3 data, 4 training, 5 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            SoaError::Config { .. } => 2,
            SoaError::Vocabulary(_)
            | SoaError::DegenerateInput(_)
            | SoaError::DataContract(_)
            | SoaError::Io(_)
            | SoaError::Csv(_) => 3,
            SoaError::Integrity(_) | SoaError::Json(_) => 5,
            SoaError::Stage { source, .. } => match source.as_ref() {
                SoaError::Config { .. } => 2,
                SoaError::DataContract(_) | SoaError::Vocabulary(_) => 3,
                SoaError::Integrity(_) => 5,
                _ => 4,
            },
            SoaError::InputTooShort { .. }
            | SoaError::Contract(_)
            | SoaError::InfeasibleTarget { .. }
            | SoaError::IncompatibleArchitecture(_) => 4,
        }
    }
}
