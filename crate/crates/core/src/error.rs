use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("undefined: {0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;
