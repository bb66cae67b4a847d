use std::collections::HashSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{read_file, write_file, IoError};

/// One row of the crowdsourced metadata database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub tilt_deg: f64,
    /// Accepted for schema compatibility; unused downstream.
    pub azimuth_deg: Option<f64>,
    pub surface_m2: f64,
    pub capacity_kwp: f64,
}

impl MetadataRecord {
    fn check(&self) -> Result<(), String> {
        let finite = [
            self.lat,
            self.lon,
            self.tilt_deg,
            self.surface_m2,
            self.capacity_kwp,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!(
                "coordinate out of range ({}, {})",
                self.lon, self.lat
            ));
        }
        if !(0.0..90.0).contains(&self.tilt_deg) {
            return Err(format!("tilt_deg {} outside [0, 90)", self.tilt_deg));
        }
        if self.surface_m2 <= 0.0 {
            return Err(format!("surface_m2 {} is not positive", self.surface_m2));
        }
        if self.capacity_kwp <= 0.0 {
            return Err(format!(
                "capacity_kwp {} is not positive",
                self.capacity_kwp
            ));
        }
        Ok(())
    }
}

/// One city of the official registry: installation count and total capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub city_code: String,
    pub dept_code: String,
    pub count: u64,
    pub capacity_kwp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReject {
    /// 1-based line number in the source file.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table<T> {
    pub records: Vec<T>,
    pub rejects: Vec<RowReject>,
}

const METADATA_COLUMNS: [&str; 7] = [
    "id",
    "lat",
    "lon",
    "tilt_deg",
    "azimuth_deg",
    "surface_m2",
    "capacity_kwp",
];
const REGISTRY_COLUMNS: [&str; 4] = ["city_code", "dept_code", "count", "capacity_kwp"];

fn read_table<T: DeserializeOwned>(
    path: &Path,
    required: &[&str],
    mut check: impl FnMut(&T) -> Result<(), String>,
) -> Result<Table<T>, IoError> {
    let bytes = read_file(path)?;
    let context = path.display().to_string();
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(IoError::EmptyFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers = reader.headers().map_err(|e| IoError::Schema {
        context: context.clone(),
        message: e.to_string(),
    })?;
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(IoError::Schema {
            context,
            message: format!("missing columns: {}", missing.join(", ")),
        });
    }
    let headers = headers.clone();
    let mut table = Table {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    for row in reader.records() {
        let row = row.map_err(|e| IoError::Schema {
            context: context.clone(),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        match row.deserialize::<T>(Some(&headers)) {
            Ok(rec) => match check(&rec) {
                Ok(()) => table.records.push(rec),
                Err(reason) => table.rejects.push(RowReject { line, reason }),
            },
            Err(e) => table.rejects.push(RowReject {
                line,
                reason: e.to_string(),
            }),
        }
    }
    Ok(table)
}

pub fn read_metadata(path: &Path) -> Result<Table<MetadataRecord>, IoError> {
    read_table(path, &METADATA_COLUMNS, MetadataRecord::check)
}

/// Duplicate city codes after the first occurrence are rejected.
pub fn read_registry(path: &Path) -> Result<Table<RegistryEntry>, IoError> {
    let mut seen = HashSet::new();
    read_table(path, &REGISTRY_COLUMNS, |r: &RegistryEntry| {
        if !(r.capacity_kwp.is_finite() && r.capacity_kwp >= 0.0) {
            return Err(format!(
                "capacity_kwp {} is negative or not finite",
                r.capacity_kwp
            ));
        }
        if r.city_code.is_empty() {
            return Err("empty city_code".into());
        }
        if !seen.insert(r.city_code.clone()) {
            return Err(format!("duplicate city_code {}", r.city_code));
        }
        Ok(())
    })
}

fn write_table<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let schema_err = |e: csv::Error| IoError::Schema {
        context: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(schema_err)?;
    for r in rows {
        w.serialize(r).map_err(schema_err)?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_file(path, &bytes)
}

pub fn write_metadata(path: &Path, records: &[MetadataRecord]) -> Result<(), IoError> {
    write_table(path, records, &METADATA_COLUMNS)
}

pub fn write_registry(path: &Path, entries: &[RegistryEntry]) -> Result<(), IoError> {
    write_table(path, entries, &REGISTRY_COLUMNS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(content: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn registry_row() {
        let f = tmp("city_code,dept_code,count,capacity_kwp\n29019,29,12,48.5\n");
        let t = read_registry(f.path()).unwrap();
        assert_eq!(
            t.records,
            vec![RegistryEntry {
                city_code: "29019".into(),
                dept_code: "29".into(),
                count: 12,
                capacity_kwp: 48.5
            }]
        );
    }

    #[test]
    fn leading_zero_codes_survive() {
        let f = tmp("city_code,dept_code,count,capacity_kwp\n01001,01,3,9\n");
        let t = read_registry(f.path()).unwrap();
        assert_eq!(t.records[0].city_code, "01001");
        assert_eq!(t.records[0].dept_code, "01");
    }

    #[test]
    fn steep_tilt_goes_to_rejects() {
        let f = tmp("id,lat,lon,tilt_deg,azimuth_deg,surface_m2,capacity_kwp\n\
             a,45.0,3.0,95,180,20,3\n\
             b,45.0,3.0,30,,20,3\n");
        let t = read_metadata(f.path()).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].id, "b");
        assert_eq!(t.records[0].azimuth_deg, None);
        assert_eq!(t.rejects.len(), 1);
        assert_eq!(t.rejects[0].line, 2);
        assert!(t.rejects[0].reason.contains("tilt"));
    }

    #[test]
    fn bad_rows_do_not_abort() {
        let f = tmp("city_code,dept_code,count,capacity_kwp\nA,1,-3,2\nB,1,x,2\nA,1,1,1\nA,1,1,1\nC,1,2,-1\n");
        let t = read_registry(f.path()).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.rejects.len(), 4);
    }

    #[test]
    fn missing_columns_and_empty_file() {
        let f = tmp("city_code,count\nA,1\n");
        assert!(matches!(
            read_registry(f.path()),
            Err(IoError::Schema { .. })
        ));
        let e = tmp("");
        assert!(matches!(
            read_registry(e.path()),
            Err(IoError::EmptyFile(_))
        ));
    }
}
