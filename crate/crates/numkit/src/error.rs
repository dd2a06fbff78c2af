use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty selection: {0}")]
    EmptySelection(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Shape {
        op,
        detail: detail.into(),
    }
}
