use tmr_core::TmrError;

/// Failures of a CLI command, split by who has to act on them.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, inputs or files: exit code 1.
    User(String),
    /// A bug or numeric breakdown: exit code 2.
    Internal(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        Self::User(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::User(_) => 1,
            Self::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::User(m) => write!(f, "{m}"),
            Self::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TmrError> for CliError {
    fn from(e: TmrError) -> Self {
        match e {
            TmrError::Numeric(_) => Self::Internal(e.to_string()),
            _ => Self::User(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::User(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::User(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
