use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("unsupported host: {0}")]
    UnsupportedHost(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint corrupted at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint incompatible with model at tensor `{name}`: {reason}")]
    Mismatch { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error: 1 config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Shape { .. }
            | Error::UnsupportedHost(_)
            | Error::Mismatch { .. } => 1,
            Error::NonFinite { .. }
            | Error::Numerical(_)
            | Error::DivisionByZero(_)
            | Error::Data(_) => 2,
            Error::Io(_) | Error::Corrupt { .. } | Error::Version { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
