use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape is degenerate (zero-sized axis, empty time axis, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Operand shapes are incompatible for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// A node, probe or named tensor does not exist.
    #[error("reference error: {0}")]
    Reference(String),

    #[error("numeric error at node {node}: {message}")]
    Numeric { node: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 for numeric failures,
    /// 1 for everything a user can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 2,
            _ => 1,
        }
    }
}
