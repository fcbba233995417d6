use std::path::PathBuf;

/// Errors of the IO and orchestration layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path} exists; pass --overwrite to replace it")]
    Exists { path: PathBuf },
    #[error(transparent)]
    Core(#[from] hallucheck_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use hallucheck_core::Error as C;
        match self {
            Error::Usage(_) | Error::Config { .. } | Error::Exists { .. } => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Core(e) => match e {
                C::InvalidArgument(_) => 1,
                C::Diverged { .. }
                | C::NonFiniteRelevance { .. }
                | C::NonFiniteAttention { .. }
                | C::DegenerateVariance
                | C::DegenerateStep { .. } => 3,
                _ => 2,
            },
        }
    }
}
