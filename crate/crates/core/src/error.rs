use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("matrix is not a proper rotation (orthonormality error {error:.3e}, det {det:.6})")]
    NotOrthonormal { error: f64, det: f64 },

    #[error("degenerate heading at frame {frame}: facing direction is vertical")]
    DegenerateHeading { frame: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples: need at least {needed}, got {found}")]
    InsufficientSamples { needed: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("text encoder unavailable: {0}")]
    EncoderUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
