use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {index} does not belong to this tape")]
    ForeignNode { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
