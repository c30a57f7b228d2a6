use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by [`ErrorKind`] so front ends can map them to
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bvh line {line}: {message}")]
    Bvh { line: usize, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("container: {0}")]
    Container(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Timestep { .. } => ErrorKind::Usage,
            Error::NonFinite(_) | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Shape(_)
            | Error::Bvh { .. }
            | Error::Data(_)
            | Error::Container(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
