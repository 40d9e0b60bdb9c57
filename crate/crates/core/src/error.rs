use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where a finite value was required.
    #[error("numeric error in {context}{}", .index.map(|i| format!(" (example {i})")).unwrap_or_default())]
    Numeric {
        context: String,
        index: Option<usize>,
    },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{}:{line}: {message}", .path.display())]
    Input {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>, index: Option<usize>) -> Self {
        Error::Numeric {
            context: context.into(),
            index,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input { .. } | Error::Io { .. } => 2,
            Error::Numeric { .. } | Error::Evaluation(_) => 3,
            Error::Oracle(_) => 4,
        }
    }
}
