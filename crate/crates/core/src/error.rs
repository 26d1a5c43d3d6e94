use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("not ready: {0}")]
    NotReady(String),

    #[error("degenerate mixture fit: all {0} values are identical")]
    DegenerateFit(usize),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(field: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: msg.into(),
        }
    }
}
