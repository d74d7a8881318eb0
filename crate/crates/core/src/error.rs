use std::path::PathBuf;

/// Errors raised across the lesion synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("invalid configuration: {0}")]
    Configuration(String),
    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: u64, what: &'static str },
    #[error("lesion transform failed: {0}")]
    Transform(String),
    #[error("no feasible placement after {attempts} attempts ({reason})")]
    Placement { attempts: u32, reason: String },
    #[error("dataset build failed: {0}")]
    DatasetBuild(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
