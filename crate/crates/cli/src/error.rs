use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failure of a harness command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or input paths (exit code 1).
    #[error("{0}")]
    Invalid(String),

    /// A check that ran to completion and did not pass (exit code 2).
    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] cpnet_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 is success; 1 marks invalid input, 2 a runtime or numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Core(e) if !e.is_runtime() => 1,
            _ => 2,
        }
    }
}
