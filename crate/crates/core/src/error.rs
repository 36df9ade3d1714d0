use std::fmt;

/// Error type shared by every module in the crate.
///
/// The variant encodes the failure class so callers (notably the CLI) can
/// map errors onto exit codes without string matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor/grid dimensions do not line up; message names both shapes.
    Shape(String),
    /// A parameter is outside its legal range (e.g. decay rate out of (0,1]).
    Param(String),
    /// Input data violates a mathematical precondition (e.g. negative prior entry).
    Domain(String),
    /// Malformed payload data (bad label id, diverged loss, ...).
    Data(String),
    /// API misuse (backward on a non-scalar, reusing a consumed tape, ...).
    Usage(String),
    /// Filesystem failure; message names the file.
    Io(String),
    /// Unparseable file contents; message names the file.
    Parse(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
