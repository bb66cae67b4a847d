use thiserror::Error;

use crate::audit::AuditError;
use crate::characteristics::CharacteristicsError;
use crate::geometry::GeometryError;
use crate::io::IoError;
use crate::lut::LutError;
use crate::postprocess::PostprocessError;
use crate::simulate::SimError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Characteristics(#[from] CharacteristicsError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Postprocess(PostprocessError::MissingBuildings) => EXIT_USAGE,
            Error::Internal(_) => EXIT_INTERNAL,
            _ => EXIT_INPUT,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Io(IoError::Io { .. }) => "io",
            Error::Io(_) => "parse",
            Error::Geometry(_) => "geometry",
            Error::Lut(_) => "lut",
            Error::Characteristics(_) => "characteristics",
            Error::Postprocess(_) => "postprocess",
            Error::Audit(_) => "audit",
            Error::Simulation(_) => "simulation",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
