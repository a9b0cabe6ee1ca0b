use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("resampling error: {0}")]
    Resample(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("non-finite value encountered: {0}")]
    Numerics(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
