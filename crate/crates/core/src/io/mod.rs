//! Readers and writers for every external file.
//!
//! * GeoJSON FeatureCollections (RFC 7946, WGS84) for detections, buildings,
//!   cities and installations.
//! * CSV with a header row for the registry, the metadata database and the
//!   per-département report.
//! * JSON for the LUT, the calibration model and the report summary.
//!
//! CSV readers collect invalid rows into a rejects list instead of failing.

mod geojson;
mod report;
mod tables;

pub use geojson::{
    parse_feature_collection, read_cities, read_installations, read_polygons, write_installations,
    write_polygons, CityBoundary, FeatureReject, PolygonKind, PolygonRecord, PolygonSet,
};
pub use report::{
    read_json, read_report_summary, report_csv, write_json, write_report, ReportSummary,
};
pub use tables::{
    read_metadata, read_registry, write_metadata, write_registry, MetadataRecord, RegistryEntry,
    RowReject, Table,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: parse error at byte {offset}: {message}")]
    Parse {
        context: String,
        offset: usize,
        message: String,
    },
    #[error("{context}: {message}")]
    Schema { context: String, message: String },
    #[error("feature {feature_index}: {source}")]
    Geometry {
        feature_index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("feature {feature_index}: missing property `{property}`")]
    MissingProperty {
        feature_index: usize,
        property: String,
    },
    #[error("{0}: file is empty")]
    EmptyFile(PathBuf),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let wrap = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(wrap)?;
    }
    std::fs::write(path, bytes).map_err(wrap)
}

/// Byte offset of a serde_json error position within `bytes`.
pub(crate) fn json_error_offset(bytes: &[u8], err: &serde_json::Error) -> usize {
    let line = err.line();
    if line == 0 {
        return 0;
    }
    let line_start = if line == 1 {
        0
    } else {
        bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(line - 2)
            .map_or(bytes.len(), |(i, _)| i + 1)
    };
    (line_start + err.column()).min(bytes.len())
}
