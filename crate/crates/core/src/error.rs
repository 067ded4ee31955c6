use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({u}, {v}) outside a {width}x{height} grid")]
    Domain {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },

    #[error("point coincides with the camera center")]
    Singularity,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame {t} needs neighbors {missing:?}, which are not in the sequence")]
    Boundary { t: usize, missing: Vec<i64> },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error(transparent)]
    Tensor(#[from] autodiff::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Coarse grouping of errors for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Domain { .. }
            | Error::Dimension(_)
            | Error::Boundary { .. }
            | Error::Consistency(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Image(_) => ErrorKind::Data,
            Error::Singularity | Error::UndefinedMetric(_) | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Tensor(autodiff::Error::NonFinite { .. }) => ErrorKind::Numeric,
            Error::Tensor(_) => ErrorKind::Internal,
        }
    }

    pub fn dimension(detail: impl Into<String>) -> Self {
        Error::Dimension(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }

    /// Weight-file errors: malformed content becomes [`Error::Format`].
    pub fn from_weights(e: autodiff::Error) -> Self {
        match e {
            autodiff::Error::Io(io) => Error::Io(io),
            autodiff::Error::Format(s) => Error::Format(s),
            autodiff::Error::Json(j) => Error::Format(j.to_string()),
            other => Error::Tensor(other),
        }
    }
}
