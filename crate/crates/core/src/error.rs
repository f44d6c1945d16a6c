use std::io;

/// Errors raised anywhere in the watermarking pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Tensor or image extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A parameter lies outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A loss or function value became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Direction of a zero vector was requested.
    #[error("undefined direction: {0}")]
    UndefinedDirection(String),

    /// Feature server failure (connection, protocol or server-side error).
    #[error("remote error: {0}")]
    Remote(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
