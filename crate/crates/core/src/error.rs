use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A taped evaluation produced a NaN/Inf; carries the offending op index.
    #[error("non-finite value produced by tape op {op}")]
    NonFinite { op: usize },

    #[error("gradient check hit a non-finite stencil at coordinate {coord}")]
    NonFiniteStencil { coord: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no surface in box")]
    EmptyLevelSet,

    #[error("file format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
