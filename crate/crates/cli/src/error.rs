use fgst::FgstError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Runtime(#[from] FgstError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Validation(_) => 3,
            Self::CheckFailed(_) => 4,
            Self::Runtime(_) | Self::Io { .. } => 5,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}
