//! Tilt look-up table keyed by projected-surface cluster and grid cell.
//!
//! Metadata records are binned into four clusters by their projected surface
//! (`surface · cos(tilt)`), then into square lon/lat cells. Each populated
//! cell stores the arithmetic mean tilt of its samples. Lookups in empty cells
//! fall back to the nearest populated cell of the same cluster (Chebyshev
//! distance on the grid), then to the cluster's national mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};
use crate::io::MetadataRecord;

pub const N_CLUSTERS: usize = 4;
pub const DEFAULT_CELL_SIZE_DEG: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LutError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid LUT configuration: {0}")]
    InvalidConfig(String),
    #[error("projected surface quartiles are not strictly ascending: {0:?}")]
    DegenerateClusters([f64; 3]),
    #[error("the LUT has no populated cells")]
    EmptyLut,
    #[error("projected area must be positive and finite, got {0}")]
    InvalidArea(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub cell_size_deg: f64,
    pub n_cols: u32,
    pub n_rows: u32,
}

impl GridSpec {
    pub fn covering(bbox: &BBox, cell_size_deg: f64) -> Result<Self, LutError> {
        if !(cell_size_deg.is_finite() && cell_size_deg > 0.0) {
            return Err(LutError::InvalidConfig(format!(
                "cell size must be positive, got {cell_size_deg}"
            )));
        }
        let (w, h) = (bbox.max_lon - bbox.min_lon, bbox.max_lat - bbox.min_lat);
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(LutError::InvalidConfig(format!(
                "empty bounding box {bbox:?}"
            )));
        }
        Ok(Self {
            origin_lon: bbox.min_lon,
            origin_lat: bbox.min_lat,
            cell_size_deg,
            n_cols: ((w / cell_size_deg).ceil() as u32).max(1),
            n_rows: ((h / cell_size_deg).ceil() as u32).max(1),
        })
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.origin_lon,
            self.origin_lat,
            self.origin_lon + self.n_cols as f64 * self.cell_size_deg,
            self.origin_lat + self.n_rows as f64 * self.cell_size_deg,
        )
    }

    /// Grid cell of a location; locations off the grid snap to the edge cell.
    pub fn cell_of(&self, p: Point) -> (u32, u32) {
        let idx = |v: f64, origin: f64, n: u32| {
            let i = ((v - origin) / self.cell_size_deg).floor();
            i.clamp(0.0, (n - 1) as f64) as u32
        };
        (
            idx(p.lon, self.origin_lon, self.n_cols),
            idx(p.lat, self.origin_lat, self.n_rows),
        )
    }

    pub fn cell_center(&self, col: u32, row: u32) -> Point {
        Point::new(
            self.origin_lon + (col as f64 + 0.5) * self.cell_size_deg,
            self.origin_lat + (row as f64 + 0.5) * self.cell_size_deg,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean_tilt_deg: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutConfig {
    pub cell_size_deg: f64,
    pub bbox: BBox,
    /// Explicit cluster thresholds; quartiles of the data when `None`.
    pub cluster_bounds: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LutFile", into = "LutFile")]
pub struct TiltLut {
    grid: GridSpec,
    cluster_bounds: [f64; 3],
    cells: BTreeMap<(u8, u32, u32), CellStat>,
    national_fallback: [f64; N_CLUSTERS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutBuild {
    pub lut: TiltLut,
    /// `(record id, reason)` for records that could not be binned.
    pub rejects: Vec<(String, String)>,
}

pub fn projected_surface(surface_m2: f64, tilt_deg: f64) -> f64 {
    surface_m2 * tilt_deg.to_radians().cos()
}

/// Cluster index of a projected area; each cluster is upper-inclusive.
pub fn cluster_of(bounds: &[f64; 3], projected_area_m2: f64) -> u8 {
    bounds.iter().filter(|&&b| projected_area_m2 > b).count() as u8
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Order-independent mean: sorts, then compensated summation.
pub(crate) fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    neumaier_sum(values.iter().copied()) / values.len() as f64
}

pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn build_lut(records: &[MetadataRecord], config: &LutConfig) -> Result<LutBuild, LutError> {
    let grid = GridSpec::covering(&config.bbox, config.cell_size_deg)?;
    let mut rejects = Vec::new();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let loc = Point::new(r.lon, r.lat);
        if !config.bbox.contains_point(loc) {
            rejects.push((r.id.clone(), "outside LUT bounding box".to_string()));
            continue;
        }
        samples.push((loc, projected_surface(r.surface_m2, r.tilt_deg), r.tilt_deg));
    }

    let cluster_bounds = match config.cluster_bounds {
        Some(bounds) => {
            if !(bounds.iter().all(|b| b.is_finite())
                && bounds[0] < bounds[1]
                && bounds[1] < bounds[2])
            {
                return Err(LutError::InvalidConfig(format!(
                    "cluster bounds must be finite and strictly ascending, got {bounds:?}"
                )));
            }
            if samples.is_empty() {
                return Err(LutError::InsufficientData(
                    "no records inside the bounding box".into(),
                ));
            }
            bounds
        }
        None => {
            if samples.len() < 4 {
                return Err(LutError::InsufficientData(format!(
                    "quartile clustering needs at least 4 records, got {}",
                    samples.len()
                )));
            }
            let mut areas: Vec<f64> = samples.iter().map(|s| s.1).collect();
            areas.sort_by(f64::total_cmp);
            let q = [
                percentile(&areas, 0.25),
                percentile(&areas, 0.5),
                percentile(&areas, 0.75),
            ];
            if !(q[0] < q[1] && q[1] < q[2]) {
                return Err(LutError::DegenerateClusters(q));
            }
            q
        }
    };

    let mut groups: BTreeMap<(u8, u32, u32), Vec<f64>> = BTreeMap::new();
    let mut per_cluster: [Vec<f64>; N_CLUSTERS] = Default::default();
    for &(loc, area, tilt) in &samples {
        let cluster = cluster_of(&cluster_bounds, area);
        let (col, row) = grid.cell_of(loc);
        groups.entry((cluster, col, row)).or_default().push(tilt);
        per_cluster[cluster as usize].push(tilt);
    }
    let cells = groups
        .into_iter()
        .map(|(key, mut tilts)| {
            let stat = CellStat {
                mean_tilt_deg: stable_mean(&mut tilts),
                sample_count: tilts.len() as u64,
            };
            (key, stat)
        })
        .collect();
    let mut all: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let overall = stable_mean(&mut all);
    let national_fallback = per_cluster.map(|mut tilts| {
        if tilts.is_empty() {
            overall
        } else {
            stable_mean(&mut tilts)
        }
    });

    Ok(LutBuild {
        lut: TiltLut {
            grid,
            cluster_bounds,
            cells,
            national_fallback,
        },
        rejects,
    })
}

impl TiltLut {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn cluster_bounds(&self) -> [f64; 3] {
        self.cluster_bounds
    }

    pub fn national_fallback(&self) -> [f64; N_CLUSTERS] {
        self.national_fallback
    }

    pub fn cell(&self, cluster: u8, col: u32, row: u32) -> Option<&CellStat> {
        self.cells.get(&(cluster, col, row))
    }

    /// Populated cells in `(cluster, col, row)` order.
    pub fn cells(&self) -> impl Iterator<Item = ((u8, u32, u32), &CellStat)> {
        self.cells.iter().map(|(&k, v)| (k, v))
    }

    pub fn lookup_tilt(&self, location: Point, projected_area_m2: f64) -> Result<f64, LutError> {
        if !(projected_area_m2.is_finite() && projected_area_m2 > 0.0) {
            return Err(LutError::InvalidArea(projected_area_m2));
        }
        if self.cells.is_empty() {
            return Err(LutError::EmptyLut);
        }
        let cluster = cluster_of(&self.cluster_bounds, projected_area_m2);
        let (col, row) = self.grid.cell_of(location);
        if let Some(c) = self.cell(cluster, col, row) {
            return Ok(c.mean_tilt_deg);
        }
        Ok(self
            .nearest_cell(cluster, col, row)
            .map(|c| c.mean_tilt_deg)
            .unwrap_or(self.national_fallback[cluster as usize]))
    }

    /// Expanding Chebyshev ring search; ties go to the lowest `(col, row)`.
    fn nearest_cell(&self, cluster: u8, col: u32, row: u32) -> Option<&CellStat> {
        let range = self
            .cells
            .range((cluster, 0, 0)..=(cluster, u32::MAX, u32::MAX));
        let (mut c0, mut c1, mut r0, mut r1) = (u32::MAX, 0, u32::MAX, 0);
        for (&(_, c, r), _) in range {
            c0 = c0.min(c);
            c1 = c1.max(c);
            r0 = r0.min(r);
            r1 = r1.max(r);
        }
        if c0 == u32::MAX {
            return None;
        }
        let (col, row) = (col as i64, row as i64);
        let max_d = [
            col - c0 as i64,
            c1 as i64 - col,
            row - r0 as i64,
            r1 as i64 - row,
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let get = |c: i64, r: i64| -> Option<((i64, i64), &CellStat)> {
            if c < 0 || r < 0 || c > u32::MAX as i64 || r > u32::MAX as i64 {
                return None;
            }
            self.cell(cluster, c as u32, r as u32).map(|s| ((c, r), s))
        };
        for d in 1..=max_d {
            let horizontal = ((col - d)..=(col + d)).flat_map(|c| [(c, row - d), (c, row + d)]);
            let vertical =
                ((row - d + 1)..=(row + d - 1)).flat_map(|r| [(col - d, r), (col + d, r)]);
            let best = horizontal
                .chain(vertical)
                .filter_map(|(c, r)| get(c, r))
                .min_by_key(|&(key, _)| key);
            if let Some((_, stat)) = best {
                return Some(stat);
            }
        }
        None
    }

    /// One CSV raster for a cluster, north row first. The header carries cell
    /// centre longitudes and the first column cell centre latitudes; empty
    /// cells are left blank.
    pub fn export_grid_csv(&self, cluster: u8) -> String {
        let mut out = String::from("lat\\lon");
        for col in 0..self.grid.n_cols {
            let _ = write!(out, ",{}", self.grid.cell_center(col, 0).lon);
        }
        out.push('\n');
        for row in (0..self.grid.n_rows).rev() {
            let _ = write!(out, "{}", self.grid.cell_center(0, row).lat);
            for col in 0..self.grid.n_cols {
                match self.cell(cluster, col, row) {
                    Some(c) => {
                        let _ = write!(out, ",{}", c.mean_tilt_deg);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// On-disk layout of a [`TiltLut`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LutFile {
    pub grid: GridSpec,
    pub cluster_bounds: [f64; 3],
    pub cells: Vec<LutCell>,
    pub national_fallback: [f64; N_CLUSTERS],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LutCell {
    pub cluster: u8,
    pub col: u32,
    pub row: u32,
    pub mean_tilt_deg: f64,
    pub sample_count: u64,
}

impl From<TiltLut> for LutFile {
    fn from(lut: TiltLut) -> Self {
        Self {
            grid: lut.grid,
            cluster_bounds: lut.cluster_bounds,
            cells: lut
                .cells
                .into_iter()
                .map(|((cluster, col, row), s)| LutCell {
                    cluster,
                    col,
                    row,
                    mean_tilt_deg: s.mean_tilt_deg,
                    sample_count: s.sample_count,
                })
                .collect(),
            national_fallback: lut.national_fallback,
        }
    }
}

impl TryFrom<LutFile> for TiltLut {
    type Error = LutError;

    fn try_from(f: LutFile) -> Result<Self, LutError> {
        let b = f.cluster_bounds;
        if !(b[0] < b[1] && b[1] < b[2]) {
            return Err(LutError::InvalidConfig(format!(
                "cluster bounds not ascending: {b:?}"
            )));
        }
        let g = f.grid;
        if !(g.cell_size_deg > 0.0 && g.n_cols > 0 && g.n_rows > 0) {
            return Err(LutError::InvalidConfig(format!("invalid grid {g:?}")));
        }
        let mut cells = BTreeMap::new();
        for c in f.cells {
            let ok = (c.cluster as usize) < N_CLUSTERS
                && c.col < g.n_cols
                && c.row < g.n_rows
                && c.sample_count >= 1
                && (0.0..90.0).contains(&c.mean_tilt_deg);
            if !ok {
                return Err(LutError::InvalidConfig(format!(
                    "invalid cell ({}, {}, {})",
                    c.cluster, c.col, c.row
                )));
            }
            cells.insert(
                (c.cluster, c.col, c.row),
                CellStat {
                    mean_tilt_deg: c.mean_tilt_deg,
                    sample_count: c.sample_count,
                },
            );
        }
        Ok(Self {
            grid: g,
            cluster_bounds: b,
            cells,
            national_fallback: f.national_fallback,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, lon: f64, lat: f64, tilt: f64, surface: f64) -> MetadataRecord {
        MetadataRecord {
            id: id.into(),
            lat,
            lon,
            tilt_deg: tilt,
            azimuth_deg: None,
            surface_m2: surface,
            capacity_kwp: 0.16 * surface,
        }
    }

    fn config(bounds: Option<[f64; 3]>) -> LutConfig {
        LutConfig {
            cell_size_deg: 0.5,
            bbox: BBox::new(0.0, 40.0, 5.0, 50.0),
            cluster_bounds: bounds,
        }
    }

    #[test]
    fn cell_mean_of_three() {
        let recs = vec![
            rec("a", 1.1, 45.1, 20.0, 10.0),
            rec("b", 1.2, 45.2, 30.0, 10.0),
            rec("c", 1.3, 45.3, 40.0, 10.0),
        ];
        let lut = build_lut(&recs, &config(Some([100.0, 200.0, 300.0])))
            .unwrap()
            .lut;
        let (col, row) = lut.grid().cell_of(Point::new(1.1, 45.1));
        assert_eq!(lut.cell(0, col, row).unwrap().mean_tilt_deg, 30.0);
        assert_eq!(lut.cell(0, col, row).unwrap().sample_count, 3);
    }

    #[test]
    fn single_record_sets_cell_and_fallback() {
        let recs = vec![rec("a", 2.0, 44.0, 25.0, 12.0)];
        let lut = build_lut(&recs, &config(Some([5.0, 20.0, 50.0])))
            .unwrap()
            .lut;
        let cluster = cluster_of(&lut.cluster_bounds(), projected_surface(12.0, 25.0));
        let (col, row) = lut.grid().cell_of(Point::new(2.0, 44.0));
        assert_eq!(lut.cell(cluster, col, row).unwrap().mean_tilt_deg, 25.0);
        assert_eq!(lut.national_fallback()[cluster as usize], 25.0);
        // Lookups anywhere in that cluster resolve to the only populated cell.
        assert_eq!(lut.lookup_tilt(Point::new(4.9, 49.9), 10.0).unwrap(), 25.0);
    }

    #[test]
    fn quartiles_need_four_records() {
        let recs = vec![rec("a", 2.0, 44.0, 25.0, 12.0); 3];
        assert!(matches!(
            build_lut(&recs, &config(None)),
            Err(LutError::InsufficientData(_))
        ));
    }

    #[test]
    fn identical_surfaces_cannot_form_quartiles() {
        let recs = vec![rec("a", 2.0, 44.0, 25.0, 12.0); 8];
        assert!(matches!(
            build_lut(&recs, &config(None)),
            Err(LutError::DegenerateClusters(_))
        ));
    }

    #[test]
    fn out_of_bbox_is_rejected_not_fatal() {
        let recs = vec![
            rec("in", 2.0, 44.0, 25.0, 12.0),
            rec("out", 20.0, 44.0, 25.0, 12.0),
        ];
        let built = build_lut(&recs, &config(Some([5.0, 20.0, 50.0]))).unwrap();
        assert_eq!(built.rejects.len(), 1);
        assert_eq!(built.rejects[0].0, "out");
    }

    #[test]
    fn neighbour_fallback_at_distance_one() {
        let recs = vec![rec("a", 1.25, 45.25, 35.0, 10.0)];
        let lut = build_lut(&recs, &config(Some([100.0, 200.0, 300.0])))
            .unwrap()
            .lut;
        // One cell east of the populated one.
        assert_eq!(lut.lookup_tilt(Point::new(1.75, 45.25), 8.0).unwrap(), 35.0);
    }

    #[test]
    fn chebyshev_tie_prefers_lowest_col_row() {
        let recs = vec![
            rec("east", 2.25, 45.25, 40.0, 10.0),
            rec("west", 1.25, 45.25, 20.0, 10.0),
        ];
        let lut = build_lut(&recs, &config(Some([100.0, 200.0, 300.0])))
            .unwrap()
            .lut;
        assert_eq!(lut.lookup_tilt(Point::new(1.75, 45.25), 8.0).unwrap(), 20.0);
    }

    #[test]
    fn upper_inclusive_clusters() {
        let b = [2.0, 5.0, 10.0];
        assert_eq!(cluster_of(&b, 2.0), 0);
        assert_eq!(cluster_of(&b, 2.0001), 1);
        assert_eq!(cluster_of(&b, 10.0), 2);
        assert_eq!(cluster_of(&b, 11.0), 3);
    }

    #[test]
    fn lookup_rejects_non_positive_area() {
        let recs = vec![rec("a", 1.25, 45.25, 35.0, 10.0)];
        let lut = build_lut(&recs, &config(Some([100.0, 200.0, 300.0])))
            .unwrap()
            .lut;
        assert_eq!(
            lut.lookup_tilt(Point::new(1.0, 45.0), 0.0),
            Err(LutError::InvalidArea(0.0))
        );
    }

    #[test]
    fn json_round_trip() {
        let recs: Vec<_> = (0..20)
            .map(|i| {
                rec(
                    &i.to_string(),
                    0.3 * i as f64 % 5.0,
                    41.0 + 0.4 * i as f64,
                    10.0 + i as f64,
                    5.0 + i as f64,
                )
            })
            .collect();
        let lut = build_lut(&recs, &config(None)).unwrap().lut;
        let json = serde_json::to_string(&lut).unwrap();
        let back: TiltLut = serde_json::from_str(&json).unwrap();
        assert_eq!(lut, back);
    }

    #[test]
    fn export_grid_shape() {
        let recs = vec![rec("a", 1.25, 45.25, 35.0, 10.0)];
        let lut = build_lut(&recs, &config(Some([100.0, 200.0, 300.0])))
            .unwrap()
            .lut;
        let csv = lut.export_grid_csv(0);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + lut.grid().n_rows as usize);
        assert!(lines
            .iter()
            .all(|l| l.split(',').count() == 1 + lut.grid().n_cols as usize));
        assert!(csv.contains(",35,") || csv.contains(",35\n"));
    }
}
