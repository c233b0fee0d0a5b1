use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file at byte {offset}: {reason}")]
    Format { path: PathBuf, offset: usize, reason: String },
    /// A verification step (gradient check, path agreement) failed.
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] cbcn_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 2 for configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownKey { .. } | Error::ConfigSyntax { .. } | Error::Config(_) => 2,
            Error::Core(cbcn_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
