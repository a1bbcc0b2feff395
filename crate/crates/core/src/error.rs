use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed tabular input. `line` is 1-based and counts the header.
    #[error("{message} at line {line}{}", column.as_ref().map(|c| format!(", column '{c}'")).unwrap_or_default())]
    Parse {
        line: usize,
        column: Option<String>,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn parse(line: usize, column: Option<&str>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column: column.map(str::to_string),
            message: message.into(),
        }
    }
}
