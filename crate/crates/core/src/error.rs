use thiserror::Error;

/// Errors produced anywhere in the decoding and training stack.
#[derive(Debug, Error)]
pub enum HassError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("autodiff error: {0}")]
    Graph(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HassError>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::HassError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
