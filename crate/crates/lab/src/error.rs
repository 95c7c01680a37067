use std::path::PathBuf;

/// Errors of the harness, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{context}: {source}")]
    Run {
        context: String,
        source: akd_core::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Verification(_) => 1,
            LabError::Usage(_) | LabError::Config(_) | LabError::Format { .. } => 2,
            LabError::Run { source, .. } => match source {
                akd_core::Error::Config(_) | akd_core::Error::Usage(_) => 2,
                akd_core::Error::Verification(_) => 1,
                _ => 3,
            },
            LabError::Io { .. } => 3,
        }
    }

    /// Wraps a core error with the run or file it came from.
    pub fn run(context: impl Into<String>) -> impl FnOnce(akd_core::Error) -> LabError {
        let context = context.into();
        move |source| LabError::Run { context, source }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}
