use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: field `{field}`: {msg}")]
    Config { path: String, field: String, msg: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dupire_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// Process exit status: 2 for configuration and usage problems, 1 for
    /// everything raised while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
