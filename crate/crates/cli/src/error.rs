use thiserror::Error;

/// Errors surfaced by the command-line tool, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("cannot read config {path}: {source}")]
    ConfigFile {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed for one channel.
    #[error("stage `{stage}` failed for channel `{channel}`: {source}")]
    Stage {
        stage: &'static str,
        channel: String,
        #[source]
        source: driftlab_core::error::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// `2` for configuration problems, `3` for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } | CliError::ConfigFile { .. } => 2,
            _ => 3,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}
