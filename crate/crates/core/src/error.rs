use std::path::PathBuf;

use idf_geometry::GeometryError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdfError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate base normal at ({:.6}, {:.6}, {:.6}): gradient norm {norm:e}", point[0], point[1], point[2])]
    DegenerateNormal { point: [f64; 3], norm: f64 },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("bound not applicable: {0}")]
    InapplicableBound(String),
    #[error("pipeline order error: {0}")]
    PipelineOrder(String),
    #[error("non-finite loss or gradient at epoch {}, step {}", .0.epoch, .0.step)]
    NonFinite(Box<crate::train::NanDiagnostic>),
    #[error("resource limit: {0}")]
    ResourceLimit(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl IdfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdfError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        IdfError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, IdfError>;
