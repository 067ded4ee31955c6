use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("operation `{op}` does not support a differentiable backward pass")]
    Capability { op: &'static str },

    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFinite { name: String },

    #[error("weight file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
