use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation parameter is out of its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// API misuse, e.g. calling backward on a non-scalar node.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared, or a linear system could not be solved.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A strategy field is not on its grid.
    #[error("{field} off grid")]
    OffGrid { field: &'static str },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no contrast aspects applicable")]
    NoContrastTerms,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Parameter(_) | Error::OffGrid { .. } => 2,
            Error::Validation(_) | Error::Json(_) => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Dimension(_) => 3,
            Error::Numeric(_) | Error::NoContrastTerms => 4,
        }
    }
}
