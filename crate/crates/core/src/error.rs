use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("row {row}, column \"{column}\": {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("at timestep {t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(t: usize, err: Error) -> Self {
        Error::AtStep {
            t,
            source: Box::new(err),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 usage/config/precondition, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 2,
            Error::Numerical(_) => 4,
            Error::AtStep { source, .. } => source.exit_code(),
            Error::Io { .. }
            | Error::Csv(_)
            | Error::Cell { .. }
            | Error::Shape(_)
            | Error::ModelFormat(_) => 3,
        }
    }
}
