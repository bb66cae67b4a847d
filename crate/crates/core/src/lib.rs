//! Distributed PV registry construction and downstream-task accuracy (DTA)
//! auditing.
//!
//! Detection polygons become installations (location, projected surface,
//! tilt, surface, installed capacity), are filtered against building
//! footprints, and are aggregated per city to be compared with an official
//! registry of installation counts and capacities.

pub mod audit;
pub mod characteristics;
pub mod cli;
mod error;
pub mod geometry;
pub mod io;
pub mod lut;
pub mod postprocess;
pub mod simulate;

pub use audit::{CityComparison, DtaReport};
pub use characteristics::{CalibrationModel, Installation};
pub use error::{Error, Result, EXIT_INPUT, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE};
pub use geometry::{Point, Polygon, SpatialIndex};
pub use io::{MetadataRecord, RegistryEntry};
pub use lut::TiltLut;
