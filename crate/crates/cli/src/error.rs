use discond::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, flags or inputs.
    #[error("{0}")]
    Validation(String),

    /// Training or evaluation produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                Error::NonFinite { .. } => 3,
                Error::Shape { .. } | Error::InvalidArgument(_) | Error::Format { .. } | Error::Dataset(_) => 2,
                Error::Io { .. } | Error::Metric(_) => 1,
            },
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}
