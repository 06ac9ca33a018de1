use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Training produced a NaN or infinity; `detail` names the first bad tensor.
    #[error("non-finite loss at step {step}: first non-finite tensor is {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Core(vah_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<vah_core::Error> for Error {
    fn from(e: vah_core::Error) -> Self {
        match e {
            vah_core::Error::Config(m) => Error::Config(m),
            vah_core::Error::Input(m) => Error::Input(m),
            vah_core::Error::Format { path, msg } => Error::Format { path, msg },
            vah_core::Error::Io { path, source } => Error::Io { path, source },
            other => Error::Core(other),
        }
    }
}

impl From<vah_fabric::Error> for Error {
    fn from(e: vah_fabric::Error) -> Self {
        match e {
            vah_fabric::Error::Shape(m) => Error::Input(m),
            vah_fabric::Error::Config(m) => Error::Config(m),
            vah_fabric::Error::Core(c) => c.into(),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
