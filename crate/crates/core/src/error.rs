use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, counts or indices that do not line up.
    #[error("structural: {0}")]
    Structural(String),

    /// Values outside their domain (non-finite, negative, degenerate).
    #[error("validation: {0}")]
    Validation(String),

    #[error("capacity: {count} primitives exceed capacity {capacity}")]
    Capacity { count: usize, capacity: usize },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("decode: {0}")]
    Decode(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("trace exhausted at t={at:.4}s (trace ends at {end:.4}s)")]
    TraceExhausted { at: f64, end: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn decode(msg: impl Into<String>) -> Self {
        Error::Decode(msg.into())
    }

    pub fn at_frame(self, frame: usize) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }

    /// Short stable code used as a machine-parsable prefix by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Structural(_) => "E_STRUCTURAL",
            Error::Validation(_) => "E_VALIDATION",
            Error::Capacity { .. } => "E_CAPACITY",
            Error::Training { .. } => "E_TRAINING",
            Error::AtFrame { source, .. } => source.code(),
            Error::Decode(_) => "E_DECODE",
            Error::Protocol(_) => "E_PROTOCOL",
            Error::TraceExhausted { .. } => "E_TRACE",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Image(_) => "E_IMAGE",
        }
    }
}
