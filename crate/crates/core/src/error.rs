use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schema error: missing column `{0}`")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        /// 1-based data row, not counting the header.
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("cannot balance dataset: {0}")]
    Balance(String),

    #[error("no labels for task: {0}")]
    EmptyLabels(String),

    #[error("fold stratification failed: {0}")]
    Stratification(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than the
    /// environment. Front ends map these to a distinct exit status.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Argument(_)
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Balance(_)
                | Error::EmptyLabels(_)
                | Error::Stratification(_)
                | Error::Usage(_)
        )
    }
}
