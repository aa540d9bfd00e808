use std::path::PathBuf;

/// Errors produced by the detector, its training loop and the synthetic benchmark.
#[derive(Debug, thiserror::Error)]
pub enum TmrError {
    /// Shapes or channel counts that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary or JSON file does not follow the expected layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Synthetic scene could not be generated with the requested settings.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TmrError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TmrError::Config(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TmrError::Argument(msg.into()))
}
