use thiserror::Error;

/// Failures of a CLI run; every variant maps to exit code 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gradphi::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("missing stage output: {0}")]
    MissingOutput(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_context(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}
