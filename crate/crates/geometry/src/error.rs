use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Where in an input stream a parse error was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(u64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Byte(b) => write!(f, "byte {b}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}: parse error at {location}: {message}")]
    Parse {
        source_name: String,
        location: Location,
        message: String,
    },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("validation failed: {0}")]
    Validation(String),
}

impl GeometryError {
    pub(crate) fn parse(source_name: &str, location: Location, message: impl Into<String>) -> Self {
        GeometryError::Parse {
            source_name: source_name.to_string(),
            location,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeometryError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GeometryError>;
