use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NumericOverflow { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
