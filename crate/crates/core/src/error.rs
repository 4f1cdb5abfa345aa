use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A data file failed validation. `line` is 1-based when known.
    #[error("{}", fmt_data(.path, .line, .message))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn fmt_data(path: &Option<PathBuf>, line: &Option<usize>, message: &str) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{}: {}", p.display(), l, message),
        (Some(p), None) => format!("{}: {}", p.display(), message),
        (None, Some(l)) => format!("line {}: {}", l, message),
        (None, None) => message.to_string(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(message: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line: None,
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by input data rather than by the program or environment.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data { .. } | Error::Unknown { .. } | Error::Io { .. } | Error::Checkpoint(_)
        )
    }
}
