use thiserror::Error;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] hint_core::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error("frozen parameters changed: checksum {expected} became {found}")]
    FreezeViolation { expected: String, found: String },
    #[error("diffusion step {t} outside [0, {steps})")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("session exhausted after {windows} windows")]
    Exhausted { windows: usize },
    #[error("unknown agent '{0}'")]
    UnknownAgent(String),
    #[error("duplicate agent id '{0}'")]
    DuplicateAgent(String),
    #[error("at most {max} agents per session")]
    TooManyAgents { max: usize },
    #[error("session closed")]
    SessionClosed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("replay diverged at window {window}: {detail}")]
    ReplayMismatch { window: usize, detail: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    pub fn shape(expected: impl ToString, found: impl ToString) -> Self {
        ModelError::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures caused by input data rather than the model.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            ModelError::Core(
                hint_core::Error::Format(_)
                    | hint_core::Error::LayoutMismatch(_)
                    | hint_core::Error::Io(_)
                    | hint_core::Error::Json(_)
                    | hint_core::Error::Shape { .. }
                    | hint_core::Error::InsufficientSamples { .. }
            ) | ModelError::Shape { .. }
        )
    }
}
