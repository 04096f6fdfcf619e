use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in '{field}': {message}")]
    Config { field: String, message: String },

    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv output {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: ggn_core::Error,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl CliError {
    pub fn core(context: impl Into<String>, source: ggn_core::Error) -> Self {
        CliError::Core {
            context: context.into(),
            source,
        }
    }

    /// Process exit code by category: 2 usage/config, 3 input data,
    /// 4 numerical failure, 5 output I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) => 2,
            CliError::Input { .. } => 3,
            CliError::Io { .. } | CliError::Csv { .. } => 5,
            CliError::Core { source, .. } => match source {
                ggn_core::Error::Parse { .. } | ggn_core::Error::Unsupported(_) => 3,
                ggn_core::Error::SingularSystem { .. }
                | ggn_core::Error::PowerFlowDiverged { .. } => 4,
                ggn_core::Error::InvalidArgument(_) => 2,
            },
        }
    }
}
