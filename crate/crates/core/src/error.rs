use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid run-length encoding: {0}")]
    Rle(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class: 2 for data and input problems,
    /// 3 for numeric failures, 1 for everything caused by how we were invoked.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Data { .. } | Error::Rle(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => 2,
            Error::Shape(_) | Error::InvalidArgument(_) => 2,
            Error::Config(_) => 1,
        }
    }
}
