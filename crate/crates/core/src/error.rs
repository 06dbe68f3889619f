use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum FgstError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("variable does not belong to this tape or is not a scalar: {0}")]
    NotOnTape(String),

    #[error("missing flow field for frame pair ({from}, {to}) at level {level}")]
    MissingFlow { from: usize, to: usize, level: usize },

    #[error("empty key set")]
    EmptyKeys,

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, FgstError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FgstError::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FgstError::InvalidArgument(msg.into()))
}
