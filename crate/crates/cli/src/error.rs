use saddle_core::SaddleError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    NotConverged(String),
    #[error(transparent)]
    Core(#[from] SaddleError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        let key = if key.is_empty() || key == "." { "<root>" } else { key };
        Self::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 1 runtime failure, 2 non-convergence, 3 bad configuration.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 3,
            CliError::Core(SaddleError::InvalidArgument(_) | SaddleError::DimensionMismatch { .. }) => 3,
            CliError::NotConverged(_) => 2,
            CliError::Io { .. } | CliError::Core(_) | CliError::Other(_) => 1,
        }
    }
}
