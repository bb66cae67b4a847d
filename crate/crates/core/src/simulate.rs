//! Synthetic landscapes with known answers.
//!
//! A rectangular grid of square cities is filled with rectangular buildings,
//! at most one true installation per building. The registry is the exact
//! city-wise aggregate of the truth. A detector with three knobs (recall,
//! false-positive rate, lognormal area noise) turns the truth into detection
//! polygons that go through the regular pipeline.
//!
//! Every random draw comes from a ChaCha stream seeded by
//! `(seed, label, index)`, so adding a new sub-generator never shifts the
//! draws of existing ones.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{audit, AuditError, CityIndex, DtaReport};
use crate::characteristics::{
    extract, fit_efficiency, per_installation_errors, CalibrationModel, CharacteristicsError,
    Installation, InstallationErrors,
};
use crate::geometry::{BBox, GeometryError, LocalFrame, Point, Polygon, EARTH_RADIUS_M};
use crate::io::{CityBoundary, MetadataRecord, RegistryEntry};
use crate::lut::{build_lut, cluster_of, GridSpec, LutConfig, LutError, TiltLut, N_CLUSTERS};
use crate::postprocess::{
    run_postprocess, BuildingIndex, PostprocessConfig, PostprocessError, Thresholds,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
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
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltField {
    /// Tilt at the grid origin latitude for the reference cluster.
    pub base_deg: f64,
    /// Change in tilt per degree of latitude northwards.
    pub per_deg_lat: f64,
    /// Projected-surface cluster thresholds (m²), also used by the LUT.
    pub cluster_bounds_m2: [f64; 3],
    pub cluster_offsets_deg: [f64; N_CLUSTERS],
}

impl Default for TiltField {
    fn default() -> Self {
        Self {
            base_deg: 28.0,
            per_deg_lat: 6.0,
            cluster_bounds_m2: [15.0, 25.0, 40.0],
            cluster_offsets_deg: [6.0, 3.0, 0.0, -3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub recall: f64,
    /// Expected false positives per true installation of the city.
    pub false_positive_rate: f64,
    /// σ of the lognormal area factor applied to kept polygons.
    pub area_noise_sigma: f64,
    /// Fraction of false positives placed off every building.
    pub off_building_rate: f64,
    pub false_positive_area_m2: Range<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            recall: 1.0,
            false_positive_rate: 0.0,
            area_noise_sigma: 0.0,
            off_building_rate: 0.0,
            false_positive_area_m2: Range { min: 2.0, max: 6.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub city_cols: u32,
    pub city_rows: u32,
    pub city_size_deg: f64,
    pub cities_per_dept: u32,
    pub installations_per_city: Range<u32>,
    pub empty_buildings_per_city: u32,
    pub installation_area_m2: Range<f64>,
    pub true_efficiency_kwp_per_m2: f64,
    pub tilt_field: TiltField,
    pub lut_cell_size_deg: f64,
    /// Probability that a true installation appears in the metadata sample.
    pub metadata_fraction: f64,
    pub detector: DetectorConfig,
    pub thresholds: Thresholds,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            origin_lon: 4.0,
            origin_lat: 45.0,
            city_cols: 10,
            city_rows: 10,
            city_size_deg: 0.01,
            cities_per_dept: 25,
            installations_per_city: Range { min: 80, max: 120 },
            empty_buildings_per_city: 10,
            installation_area_m2: Range {
                min: 8.0,
                max: 60.0,
            },
            true_efficiency_kwp_per_m2: 0.16,
            tilt_field: TiltField::default(),
            lut_cell_size_deg: 0.02,
            metadata_fraction: 1.0,
            detector: DetectorConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

const MAX_PANEL_ASPECT: f64 = 2.0;
const ROOF_MARGIN_M: Range<f64> = Range { min: 2.0, max: 6.0 };
const MAX_TILT_DEG: f64 = 85.0;

impl SimConfig {
    pub fn mapping_bbox(&self) -> BBox {
        BBox::new(
            self.origin_lon,
            self.origin_lat,
            self.origin_lon + self.city_cols as f64 * self.city_size_deg,
            self.origin_lat + self.city_rows as f64 * self.city_size_deg,
        )
    }

    pub fn lut_config(&self) -> LutConfig {
        LutConfig {
            cell_size_deg: self.lut_cell_size_deg,
            bbox: self.mapping_bbox(),
            cluster_bounds: Some(self.tilt_field.cluster_bounds_m2),
        }
    }

    fn slots_per_side(&self) -> u32 {
        let n = self.installations_per_city.max + self.empty_buildings_per_city;
        ((n as f64).sqrt().ceil() as u32).max(1)
    }

    /// Slot width and height in metres at the northern edge (the narrowest).
    fn slot_size_m(&self) -> (f64, f64) {
        let m_per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let north = self.mapping_bbox().max_lat.to_radians().cos();
        let side = self.city_size_deg / self.slots_per_side() as f64;
        (side * m_per_deg * north, side * m_per_deg)
    }

    fn max_building_side_m(&self) -> f64 {
        (self.installation_area_m2.max * MAX_PANEL_ASPECT).sqrt() + 2.0 * ROOF_MARGIN_M.max
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        let d = &self.detector;
        let unit = 0.0..=1.0;
        if !unit.contains(&d.recall) || !unit.contains(&d.off_building_rate) {
            return bad("recall and off_building_rate must lie in [0, 1]".into());
        }
        if !(d.false_positive_rate >= 0.0 && d.area_noise_sigma >= 0.0) {
            return bad("false_positive_rate and area_noise_sigma must be non-negative".into());
        }
        if !(d.false_positive_area_m2.min > 0.0
            && d.false_positive_area_m2.min <= d.false_positive_area_m2.max)
        {
            return bad("false_positive_area_m2 must satisfy 0 < min <= max".into());
        }
        if !(self.metadata_fraction > 0.0 && self.metadata_fraction <= 1.0) {
            return bad("metadata_fraction must lie in (0, 1]".into());
        }
        if self.city_cols == 0 || self.city_rows == 0 || self.cities_per_dept == 0 {
            return bad("city grid and cities_per_dept must be non-zero".into());
        }
        if !(self.city_size_deg > 0.0 && self.lut_cell_size_deg > 0.0) {
            return bad("city_size_deg and lut_cell_size_deg must be positive".into());
        }
        if self.installations_per_city.min > self.installations_per_city.max {
            return bad("installations_per_city.min exceeds max".into());
        }
        let a = &self.installation_area_m2;
        if !(a.min > 0.0 && a.min <= a.max) {
            return bad("installation_area_m2 must satisfy 0 < min <= max".into());
        }
        let eta = self.true_efficiency_kwp_per_m2;
        if !eta.is_finite() || eta <= 0.0 {
            return bad("true_efficiency_kwp_per_m2 must be positive and finite".into());
        }
        let b = self.tilt_field.cluster_bounds_m2;
        if !(b[0] < b[1] && b[1] < b[2]) {
            return bad("tilt_field.cluster_bounds_m2 must be strictly ascending".into());
        }
        let bbox = self.mapping_bbox();
        if !(Point::new(bbox.min_lon, bbox.min_lat).is_valid()
            && Point::new(bbox.max_lon, bbox.max_lat).is_valid())
        {
            return bad("city grid leaves the WGS84 range".into());
        }
        let (w, h) = self.slot_size_m();
        let need = self.max_building_side_m() + 2.0 * (d.false_positive_area_m2.max.sqrt() + 1.0);
        if w < 2.0 * need || h < need {
            return bad(format!(
                "city too small for its buildings: slots are {w:.1} m x {h:.1} m, need {:.1} m x {need:.1} m",
                2.0 * need
            ));
        }
        Ok(())
    }

    /// Ground-truth tilt for an installation of `area` centred at `center`.
    pub fn true_tilt(&self, grid: &GridSpec, center: Point, area_m2: f64) -> f64 {
        let (col, row) = grid.cell_of(center);
        let lat = grid.cell_center(col, row).lat;
        let t = &self.tilt_field;
        let cluster = cluster_of(&t.cluster_bounds_m2, area_m2) as usize;
        (t.base_deg + t.per_deg_lat * (lat - self.origin_lat) + t.cluster_offsets_deg[cluster])
            .clamp(0.0, MAX_TILT_DEG)
    }
}

/// Independent random stream for a labelled sub-generator.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the label, then splitmix64 finalisation.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueInstallation {
    pub id: String,
    pub city_code: String,
    pub building_id: String,
    pub center: Point,
    pub polygon: Polygon,
    pub width_m: f64,
    pub height_m: f64,
    pub projected_area_m2: f64,
    pub tilt_deg: f64,
    pub surface_m2: f64,
    pub capacity_kwp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub building: usize,
    pub occupied: bool,
    /// Centre of the building-free strip next to the building.
    pub gap_center: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cities: Vec<CityBoundary>,
    pub buildings: Vec<(String, Polygon)>,
    pub installations: Vec<TrueInstallation>,
    pub registry: Vec<RegistryEntry>,
    /// Metadata records for every true installation.
    pub full_metadata: Vec<MetadataRecord>,
    /// Sampled subset used to build the LUT and the calibration.
    pub metadata: Vec<MetadataRecord>,
    pub slots: BTreeMap<String, Vec<Slot>>,
}

pub fn city_code(col: u32, row: u32) -> String {
    format!("{:03}{:03}", row, col)
}

pub fn generate_ground_truth(cfg: &SimConfig) -> Result<GroundTruth, SimError> {
    cfg.validate()?;
    let grid = GridSpec::covering(&cfg.mapping_bbox(), cfg.lut_cell_size_deg)?;
    let per_side = cfg.slots_per_side();
    let slot_deg = cfg.city_size_deg / per_side as f64;
    let mut gt = GroundTruth {
        cities: Vec::new(),
        buildings: Vec::new(),
        installations: Vec::new(),
        registry: Vec::new(),
        full_metadata: Vec::new(),
        metadata: Vec::new(),
        slots: BTreeMap::new(),
    };
    let eta = cfg.true_efficiency_kwp_per_m2;

    for idx in 0..cfg.city_cols * cfg.city_rows {
        let (col, row) = (idx % cfg.city_cols, idx / cfg.city_cols);
        let code = city_code(col, row);
        let dept = format!("{:02}", 1 + idx / cfg.cities_per_dept);
        let lon0 = cfg.origin_lon + col as f64 * cfg.city_size_deg;
        let lat0 = cfg.origin_lat + row as f64 * cfg.city_size_deg;
        let (lon1, lat1) = (lon0 + cfg.city_size_deg, lat0 + cfg.city_size_deg);
        let boundary = Polygon::simple(vec![
            Point::new(lon0, lat0),
            Point::new(lon1, lat0),
            Point::new(lon1, lat1),
            Point::new(lon0, lat1),
        ])?;
        gt.cities.push(CityBoundary {
            city_code: code.clone(),
            dept_code: dept.clone(),
            parts: vec![boundary],
        });

        let mut rng = stream(cfg.seed, "city.layout", idx as u64);
        let n_inst =
            rng.random_range(cfg.installations_per_city.min..=cfg.installations_per_city.max);
        let n_slots = (n_inst + cfg.empty_buildings_per_city) as usize;
        let mut positions: Vec<u32> = (0..per_side * per_side).collect();
        positions.shuffle(&mut rng);

        let mut slots = Vec::with_capacity(n_slots);
        let mut city_insts = Vec::new();
        for (s, &pos) in positions.iter().take(n_slots).enumerate() {
            let (sc, sr) = (pos % per_side, pos / per_side);
            let slot_center = Point::new(
                lon0 + (sc as f64 + 0.5) * slot_deg,
                lat0 + (sr as f64 + 0.5) * slot_deg,
            );
            let frame = LocalFrame::new(slot_center);
            let (slot_w, _) = {
                let (x, _) =
                    frame.to_local(Point::new(slot_center.lon + slot_deg, slot_center.lat));
                (x, 0.0)
            };
            let occupied = s < n_inst as usize;
            let area =
                rng.random_range(cfg.installation_area_m2.min..=cfg.installation_area_m2.max);
            let aspect = rng.random_range(1.0..=MAX_PANEL_ASPECT);
            let (pw, ph) = ((area * aspect).sqrt(), (area / aspect).sqrt());
            let (mx, my) = (
                rng.random_range(ROOF_MARGIN_M.min..=ROOF_MARGIN_M.max),
                rng.random_range(ROOF_MARGIN_M.min..=ROOF_MARGIN_M.max),
            );
            let (bw, bh) = (pw + 2.0 * mx, ph + 2.0 * my);
            let building_center = frame.to_lonlat(-0.25 * slot_w, 0.0);
            let building_id = format!("{code}-b{s:04}");
            gt.buildings.push((
                building_id.clone(),
                Polygon::rectangle(building_center, bw, bh)?,
            ));
            slots.push(Slot {
                building: gt.buildings.len() - 1,
                occupied,
                gap_center: frame.to_lonlat(0.25 * slot_w, 0.0),
            });
            if !occupied {
                continue;
            }
            let bframe = LocalFrame::new(building_center);
            let (dx, dy) = (
                rng.random_range(-0.5..=0.5) * mx,
                rng.random_range(-0.5..=0.5) * my,
            );
            let center = bframe.to_lonlat(dx, dy);
            let polygon = Polygon::rectangle(center, pw, ph)?;
            let projected = polygon.area_m2();
            let tilt = cfg.true_tilt(&grid, center, projected);
            let surface = crate::characteristics::deproject(projected, tilt);
            city_insts.push(TrueInstallation {
                id: format!("{code}-i{:04}", city_insts.len()),
                city_code: code.clone(),
                building_id,
                center,
                polygon,
                width_m: pw,
                height_m: ph,
                projected_area_m2: projected,
                tilt_deg: tilt,
                surface_m2: surface,
                capacity_kwp: eta * surface,
            });
        }

        gt.registry.push(RegistryEntry {
            city_code: code.clone(),
            dept_code: dept,
            count: city_insts.len() as u64,
            capacity_kwp: city_insts.iter().map(|t| t.capacity_kwp).sum(),
        });
        let mut meta_rng = stream(cfg.seed, "metadata.sample", idx as u64);
        for t in &city_insts {
            let rec = MetadataRecord {
                id: t.id.clone(),
                lat: t.center.lat,
                lon: t.center.lon,
                tilt_deg: t.tilt_deg,
                azimuth_deg: Some(180.0),
                surface_m2: t.surface_m2,
                capacity_kwp: t.capacity_kwp,
            };
            if meta_rng.random::<f64>() < cfg.metadata_fraction {
                gt.metadata.push(rec.clone());
            }
            gt.full_metadata.push(rec);
        }
        gt.installations.extend(city_insts);
        gt.slots.insert(code, slots);
    }
    Ok(gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: String,
    pub polygon: Polygon,
    pub true_positive: bool,
    pub off_building: bool,
}

pub fn apply_detector(gt: &GroundTruth, cfg: &SimConfig) -> Result<Vec<Detection>, SimError> {
    cfg.validate()?;
    let d = &cfg.detector;
    let mut by_city: BTreeMap<&str, Vec<&TrueInstallation>> = BTreeMap::new();
    for t in &gt.installations {
        by_city.entry(t.city_code.as_str()).or_default().push(t);
    }
    let mut out = Vec::new();
    for (idx, city) in gt.cities.iter().enumerate() {
        let truths = by_city
            .get(city.city_code.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let mut recall_rng = stream(cfg.seed, "detector.recall", idx as u64);
        let mut noise_rng = stream(cfg.seed, "detector.noise", idx as u64);
        for t in truths {
            if recall_rng.random::<f64>() >= d.recall {
                continue;
            }
            let polygon = if d.area_noise_sigma > 0.0 {
                let z: f64 = noise_rng.sample(StandardNormal);
                let scale = (d.area_noise_sigma * z).exp().sqrt();
                Polygon::rectangle(t.center, t.width_m * scale, t.height_m * scale)?
            } else {
                t.polygon.clone()
            };
            out.push(Detection {
                id: t.id.clone(),
                polygon,
                true_positive: true,
                off_building: false,
            });
        }

        let mut fp_rng = stream(cfg.seed, "detector.false_positives", idx as u64);
        let expected = d.false_positive_rate * truths.len() as f64;
        let n_fp =
            expected.floor() as usize + usize::from(fp_rng.random::<f64>() < expected.fract());
        let slots = &gt.slots[&city.city_code];
        let empty: Vec<&Slot> = slots.iter().filter(|s| !s.occupied).collect();
        for j in 0..n_fp {
            let area =
                fp_rng.random_range(d.false_positive_area_m2.min..=d.false_positive_area_m2.max);
            let side = area.sqrt();
            let off = fp_rng.random::<f64>() < d.off_building_rate;
            let slot = slots[fp_rng.random_range(0..slots.len())].clone();
            let center = if off {
                slot.gap_center
            } else {
                let host = if empty.is_empty() {
                    &slot
                } else {
                    empty[fp_rng.random_range(0..empty.len())]
                };
                gt.buildings[host.building].1.centroid()
            };
            out.push(Detection {
                id: format!("{}-f{j:04}", city.city_code),
                polygon: Polygon::rectangle(center, side, side)?,
                true_positive: false,
                off_building: off,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub filtered: DtaReport,
    pub unfiltered: DtaReport,
    /// Per-installation errors of the filtered output against the truth.
    pub truth_errors: Option<InstallationErrors>,
    pub lut: TiltLut,
    pub calibration: CalibrationModel,
    pub detections: Vec<Detection>,
    pub installations: Vec<Installation>,
}

/// Generate → LUT and calibration from the metadata sample → detect →
/// extract → post-process (with and without the building filter) → audit.
pub fn run_end_to_end(cfg: &SimConfig) -> Result<(GroundTruth, SimOutcome), SimError> {
    let gt = generate_ground_truth(cfg)?;
    let outcome = evaluate(&gt, cfg)?;
    Ok((gt, outcome))
}

/// Everything after generation, so one truth can be replayed under several
/// detector settings. `gt` must come from a config with the same scene.
pub fn evaluate(gt: &GroundTruth, cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    cfg.validate()?;
    let lut = build_lut(&gt.metadata, &cfg.lut_config())?.lut;
    let calibration = fit_efficiency(&gt.metadata)?;
    let detections = apply_detector(gt, cfg)?;
    let installations = detections
        .iter()
        .map(|d| extract(d.id.clone(), d.polygon.clone(), &lut, &calibration))
        .collect::<Result<Vec<_>, _>>()?;

    let buildings = BuildingIndex::new(gt.buildings.clone())?;
    let cities = CityIndex::new(gt.cities.clone())?;
    let mut reports = Vec::with_capacity(2);
    let mut kept_filtered = Vec::new();
    for enable in [true, false] {
        let config = PostprocessConfig {
            enable_building_filter: enable,
            thresholds: cfg.thresholds,
        };
        let (kept, stats) = run_postprocess(
            installations.clone(),
            Some(&buildings),
            &lut,
            &calibration,
            &config,
        )?;
        if enable {
            kept_filtered = kept.clone();
        }
        let mut report = audit(kept, &cities, &gt.registry, enable)?;
        report.filter_stats = Some(stats);
        reports.push(report);
    }
    let unfiltered = reports.pop().expect("two variants");
    let filtered = reports.pop().expect("two variants");
    let truth_errors = per_installation_errors(&kept_filtered, &gt.full_metadata).ok();
    Ok(SimOutcome {
        filtered,
        unfiltered,
        truth_errors,
        lut,
        calibration,
        detections,
        installations: kept_filtered,
    })
}
