//! From detection polygons to installations: tilt imputation, de-projected
//! surface and calibrated installed capacity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point, Polygon};
use crate::io::MetadataRecord;
use crate::lut::{LutError, TiltLut};

/// Tilts are capped here before de-projection so `1 / cos` stays bounded.
pub const MAX_TILT_DEG: f64 = 89.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharacteristicsError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate fit: sum of squared surfaces is zero")]
    DegenerateFit,
    #[error("no matching estimate/reference pairs")]
    NoMatches,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lut(#[from] LutError),
}

/// One PV system as reconstructed from imagery.
#[derive(Debug, Clone, PartialEq)]
pub struct Installation {
    pub id: String,
    pub location: Point,
    pub projected_area_m2: f64,
    pub tilt_deg: f64,
    pub surface_m2: f64,
    pub capacity_kwp: f64,
    pub building_id: Option<String>,
    pub city_code: Option<String>,
    pub dept_code: Option<String>,
    /// Source polygons; more than one after a same-rooftop merge.
    pub footprint: Vec<Polygon>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub efficiency_kwp_per_m2: f64,
    pub n_samples: u64,
    pub rmse_kwp: f64,
}

impl CalibrationModel {
    pub fn new(efficiency_kwp_per_m2: f64) -> Self {
        Self {
            efficiency_kwp_per_m2,
            n_samples: 0,
            rmse_kwp: 0.0,
        }
    }

    pub fn capacity_kwp(&self, surface_m2: f64) -> f64 {
        self.efficiency_kwp_per_m2 * surface_m2
    }
}

/// Least squares through the origin of capacity on surface.
pub fn fit_efficiency(
    records: &[MetadataRecord],
) -> Result<CalibrationModel, CharacteristicsError> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.surface_m2 > 0.0)
        .map(|r| (r.surface_m2, r.capacity_kwp))
        .collect();
    fit_through_origin(&pairs)
}

/// `η = Σ(S·C) / Σ(S²)` over `(surface, capacity)` pairs.
pub fn fit_through_origin(pairs: &[(f64, f64)]) -> Result<CalibrationModel, CharacteristicsError> {
    if pairs.len() < 2 {
        return Err(CharacteristicsError::InsufficientData(format!(
            "need at least 2 records with positive surface, got {}",
            pairs.len()
        )));
    }
    let sxy: f64 = pairs.iter().map(|&(s, c)| s * c).sum();
    let sxx: f64 = pairs.iter().map(|&(s, _)| s * s).sum();
    if sxx == 0.0 {
        return Err(CharacteristicsError::DegenerateFit);
    }
    let eta = sxy / sxx;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(CharacteristicsError::InsufficientData(format!(
            "fitted efficiency {eta} is not positive"
        )));
    }
    let sse: f64 = pairs.iter().map(|&(s, c)| (c - eta * s).powi(2)).sum();
    Ok(CalibrationModel {
        efficiency_kwp_per_m2: eta,
        n_samples: pairs.len() as u64,
        rmse_kwp: (sse / pairs.len() as f64).sqrt(),
    })
}

/// Real panel surface from the projected footprint.
pub fn deproject(projected_area_m2: f64, tilt_deg: f64) -> f64 {
    projected_area_m2 / tilt_deg.min(MAX_TILT_DEG).to_radians().cos()
}

impl Installation {
    /// Recomputes tilt, surface and capacity from location and projected area.
    pub fn refresh(&mut self, lut: &TiltLut, calib: &CalibrationModel) -> Result<(), LutError> {
        self.tilt_deg = lut.lookup_tilt(self.location, self.projected_area_m2)?;
        self.surface_m2 = deproject(self.projected_area_m2, self.tilt_deg);
        self.capacity_kwp = calib.capacity_kwp(self.surface_m2);
        Ok(())
    }
}

pub fn extract(
    id: impl Into<String>,
    polygon: Polygon,
    lut: &TiltLut,
    calib: &CalibrationModel,
) -> Result<Installation, CharacteristicsError> {
    let location = polygon.centroid();
    let projected_area_m2 = polygon.area_m2();
    let mut inst = Installation {
        id: id.into(),
        location,
        projected_area_m2,
        tilt_deg: 0.0,
        surface_m2: 0.0,
        capacity_kwp: 0.0,
        building_id: None,
        city_code: None,
        dept_code: None,
        footprint: vec![polygon],
    };
    inst.refresh(lut, calib)?;
    Ok(inst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallationErrors {
    pub n_pairs: usize,
    pub mae_kwp: f64,
    pub mape_pct: f64,
    /// Aggregate relative error of total surface over the matched set.
    pub mre_area_pct: f64,
    /// Ids of matched pairs whose reference capacity or surface is not positive.
    pub rejected: Vec<String>,
}

/// Per-installation capacity and surface errors against reference metadata,
/// matching by id.
pub fn per_installation_errors(
    estimates: &[Installation],
    reference: &[MetadataRecord],
) -> Result<InstallationErrors, CharacteristicsError> {
    let by_id: HashMap<&str, &MetadataRecord> =
        reference.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut sorted: Vec<&Installation> = estimates.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rejected = Vec::new();
    let (mut abs_sum, mut pct_sum, mut n) = (0.0, 0.0, 0usize);
    let (mut est_area, mut ref_area) = (0.0, 0.0);
    for est in sorted {
        let Some(r) = by_id.get(est.id.as_str()) else {
            continue;
        };
        if !(r.capacity_kwp > 0.0 && r.surface_m2 > 0.0) {
            rejected.push(est.id.clone());
            continue;
        }
        let err = (est.capacity_kwp - r.capacity_kwp).abs();
        abs_sum += err;
        pct_sum += err / r.capacity_kwp;
        est_area += est.surface_m2;
        ref_area += r.surface_m2;
        n += 1;
    }
    if n == 0 {
        return Err(CharacteristicsError::NoMatches);
    }
    Ok(InstallationErrors {
        n_pairs: n,
        mae_kwp: abs_sum / n as f64,
        mape_pct: 100.0 * pct_sum / n as f64,
        mre_area_pct: 100.0 * (est_area - ref_area).abs() / ref_area,
        rejected,
    })
}
