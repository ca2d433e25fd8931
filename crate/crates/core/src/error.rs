use alloc::string::String;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("incomplete data: {0}")]
    DataIncomplete(String),
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("covariance fit failed: {0}")]
    FitFailed(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
