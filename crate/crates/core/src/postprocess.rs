//! Building filter, same-rooftop merge and size thresholds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{CalibrationModel, Installation};
use crate::geometry::{GeometryError, Point, Polygon, SpatialIndex};
use crate::lut::{neumaier_sum, LutError, TiltLut};

pub const DEFAULT_MIN_AREA_M2: f64 = 1.7;
pub const DEFAULT_MAX_CAPACITY_KWP: f64 = 36.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("building filter enabled but no building footprints were supplied")]
    MissingBuildings,
    #[error(transparent)]
    Lut(#[from] LutError),
}

/// Building footprints with an R-tree over their bounding boxes.
#[derive(Debug, Clone)]
pub struct BuildingIndex {
    ids: Vec<String>,
    polygons: Vec<Polygon>,
    index: SpatialIndex,
}

impl BuildingIndex {
    /// Multi-part buildings may appear as several entries sharing an id.
    pub fn new(buildings: Vec<(String, Polygon)>) -> Result<Self, GeometryError> {
        let (ids, polygons): (Vec<_>, Vec<_>) = buildings.into_iter().unzip();
        let index = SpatialIndex::from_polygons(&polygons)?;
        Ok(Self {
            ids,
            polygons,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Polygon)> {
        self.ids.iter().map(String::as_str).zip(&self.polygons)
    }

    /// Building whose footprint best covers `footprint`, if any intersects.
    pub fn best_building(&self, location: Point, footprint: &[Polygon]) -> Option<&str> {
        let mut best: Option<(usize, &str)> = None;
        let mut candidates: Vec<usize> = footprint
            .iter()
            .flat_map(|p| self.index.query_candidates(p))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        for pos in candidates {
            let building = &self.polygons[pos];
            if !footprint.iter().any(|p| p.intersects(building)) {
                continue;
            }
            let score = overlap_score(location, footprint, building);
            let id = self.ids[pos].as_str();
            let better = match best {
                None => true,
                Some((s, b)) => score > s || (score == s && id < b),
            };
            if better {
                best = Some((score, id));
            }
        }
        best.map(|(_, id)| id)
    }
}

/// Intersection indicator: how many of the installation's sample points
/// (its location and every exterior vertex) lie in `building`.
pub fn overlap_score(location: Point, footprint: &[Polygon], building: &Polygon) -> usize {
    std::iter::once(location)
        .chain(footprint.iter().flat_map(|p| p.exterior().iter().copied()))
        .filter(|&pt| building.contains_point(pt))
        .count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input_count: usize,
    pub dropped_no_building: usize,
    /// Buildings on which two or more detections were merged.
    pub merged_groups: usize,
    /// Installations absorbed by merging (members minus groups).
    pub merged_away: usize,
    pub dropped_too_small: usize,
    pub dropped_too_large: usize,
    pub output_count: usize,
}

impl FilterStats {
    pub fn is_balanced(&self) -> bool {
        self.input_count
            == self.output_count
                + self.dropped_no_building
                + self.merged_away
                + self.dropped_too_small
                + self.dropped_too_large
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_area_m2: f64,
    pub max_capacity_kwp: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_area_m2: DEFAULT_MIN_AREA_M2,
            max_capacity_kwp: DEFAULT_MAX_CAPACITY_KWP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub enable_building_filter: bool,
    pub thresholds: Thresholds,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            enable_building_filter: true,
            thresholds: Thresholds::default(),
        }
    }
}

pub fn assign_buildings(
    installations: Vec<Installation>,
    buildings: &BuildingIndex,
) -> Vec<Installation> {
    installations
        .into_par_iter()
        .map(|mut inst| {
            inst.building_id = buildings
                .best_building(inst.location, &inst.footprint)
                .map(str::to_string);
            inst
        })
        .collect()
}

/// Collapses installations sharing a building id. Returns the merged list
/// (sorted by id) together with `(merged_groups, merged_away)`.
pub fn merge_per_building(
    installations: Vec<Installation>,
    lut: &TiltLut,
    calib: &CalibrationModel,
) -> Result<(Vec<Installation>, usize, usize), LutError> {
    let mut out = Vec::with_capacity(installations.len());
    let mut groups: BTreeMap<String, Vec<Installation>> = BTreeMap::new();
    for inst in installations {
        match inst.building_id.clone() {
            Some(b) => groups.entry(b).or_default().push(inst),
            None => out.push(inst),
        }
    }
    let (mut merged_groups, mut merged_away) = (0, 0);
    for (_, mut members) in groups {
        if members.len() == 1 {
            out.extend(members);
            continue;
        }
        merged_groups += 1;
        merged_away += members.len() - 1;
        members.sort_by(|a, b| a.id.cmp(&b.id));
        out.push(merge_group(members, lut, calib)?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((out, merged_groups, merged_away))
}

/// `members` must be sorted by id and share a building.
fn merge_group(
    members: Vec<Installation>,
    lut: &TiltLut,
    calib: &CalibrationModel,
) -> Result<Installation, LutError> {
    let area = neumaier_sum(members.iter().map(|m| m.projected_area_m2));
    let lon = neumaier_sum(members.iter().map(|m| m.projected_area_m2 * m.location.lon)) / area;
    let lat = neumaier_sum(members.iter().map(|m| m.projected_area_m2 * m.location.lat)) / area;
    let mut merged = Installation {
        id: members[0].id.clone(),
        location: Point::new(lon, lat),
        projected_area_m2: area,
        tilt_deg: 0.0,
        surface_m2: 0.0,
        capacity_kwp: 0.0,
        building_id: members[0].building_id.clone(),
        city_code: None,
        dept_code: None,
        footprint: members.into_iter().flat_map(|m| m.footprint).collect(),
    };
    merged.refresh(lut, calib)?;
    Ok(merged)
}

/// Strict inequalities: exactly `min_area_m2` and exactly `max_capacity_kwp`
/// are kept.
pub fn apply_thresholds(
    installations: Vec<Installation>,
    thresholds: &Thresholds,
) -> (Vec<Installation>, FilterStats) {
    let mut stats = FilterStats {
        input_count: installations.len(),
        ..Default::default()
    };
    let kept: Vec<Installation> = installations
        .into_iter()
        .filter(|i| {
            if i.projected_area_m2 < thresholds.min_area_m2 {
                stats.dropped_too_small += 1;
                false
            } else if i.capacity_kwp > thresholds.max_capacity_kwp {
                stats.dropped_too_large += 1;
                false
            } else {
                true
            }
        })
        .collect();
    stats.output_count = kept.len();
    (kept, stats)
}

/// With the building filter: assign → drop unassigned → merge → thresholds.
/// Without it: thresholds only. Output is sorted by id.
pub fn run_postprocess(
    installations: Vec<Installation>,
    buildings: Option<&BuildingIndex>,
    lut: &TiltLut,
    calib: &CalibrationModel,
    config: &PostprocessConfig,
) -> Result<(Vec<Installation>, FilterStats), PostprocessError> {
    let input_count = installations.len();
    let (mut kept, mut stats) = if config.enable_building_filter {
        let buildings = buildings.ok_or(PostprocessError::MissingBuildings)?;
        let assigned = assign_buildings(installations, buildings);
        let (on_building, off): (Vec<_>, Vec<_>) =
            assigned.into_iter().partition(|i| i.building_id.is_some());
        let (merged, merged_groups, merged_away) = merge_per_building(on_building, lut, calib)?;
        let (kept, mut stats) = apply_thresholds(merged, &config.thresholds);
        stats.dropped_no_building = off.len();
        stats.merged_groups = merged_groups;
        stats.merged_away = merged_away;
        (kept, stats)
    } else {
        apply_thresholds(installations, &config.thresholds)
    };
    stats.input_count = input_count;
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    debug_assert!(stats.is_balanced());
    Ok((kept, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::io::MetadataRecord;
    use crate::lut::{build_lut, LutConfig};

    fn lut() -> TiltLut {
        let r = MetadataRecord {
            id: "m".into(),
            lat: 45.0,
            lon: 3.0,
            tilt_deg: 0.0,
            azimuth_deg: None,
            surface_m2: 10.0,
            capacity_kwp: 2.0,
        };
        build_lut(
            &[r],
            &LutConfig {
                cell_size_deg: 0.5,
                bbox: BBox::new(0.0, 40.0, 10.0, 50.0),
                cluster_bounds: Some([1.0e3, 2.0e3, 3.0e3]),
            },
        )
        .unwrap()
        .lut
    }

    fn inst(id: &str, center: Point, w: f64, h: f64) -> Installation {
        let poly = Polygon::rectangle(center, w, h).unwrap();
        crate::characteristics::extract(id, poly, &lut(), &CalibrationModel::new(0.2)).unwrap()
    }

    fn with(area: f64, capacity: f64) -> Installation {
        let mut i = inst("x", Point::new(3.0, 45.0), 2.0, 2.0);
        i.projected_area_m2 = area;
        i.capacity_kwp = capacity;
        i
    }

    fn buildings() -> BuildingIndex {
        BuildingIndex::new(vec![
            (
                "B1".into(),
                Polygon::rectangle(Point::new(3.0, 45.0), 30.0, 20.0).unwrap(),
            ),
            (
                "B2".into(),
                Polygon::rectangle(Point::new(3.01, 45.0), 30.0, 20.0).unwrap(),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn polygon_inside_footprint_gets_building() {
        let out = assign_buildings(
            vec![inst("a", Point::new(3.0, 45.0), 4.0, 3.0)],
            &buildings(),
        );
        assert_eq!(out[0].building_id.as_deref(), Some("B1"));
    }

    #[test]
    fn polygon_in_field_stays_unassigned() {
        let out = assign_buildings(
            vec![inst("a", Point::new(3.005, 45.0), 4.0, 3.0)],
            &buildings(),
        );
        assert_eq!(out[0].building_id, None);
    }

    #[test]
    fn straddle_goes_to_larger_overlap_then_lowest_id() {
        // Two footprints sharing an edge; the panel sits mostly on the eastern one.
        let west = Polygon::rectangle(Point::new(3.0, 45.0), 20.0, 20.0).unwrap();
        let east_center = west.frame().to_lonlat(20.0, 0.0);
        let east = Polygon::rectangle(east_center, 20.0, 20.0).unwrap();
        let idx = BuildingIndex::new(vec![("W".into(), west.clone()), ("E".into(), east)]).unwrap();
        let panel = Polygon::from_local(
            &west.frame(),
            &[(8.0, -1.0), (14.0, -1.0), (14.0, 1.0), (8.0, 1.0)],
        )
        .unwrap();
        let i = crate::characteristics::extract("p", panel, &lut(), &CalibrationModel::new(0.2))
            .unwrap();
        assert_eq!(
            assign_buildings(vec![i], &idx)[0].building_id.as_deref(),
            Some("E")
        );
    }

    #[test]
    fn two_halves_merge_into_one() {
        let a = inst("a", Point::new(3.0, 45.0), 2.5, 2.0);
        let frame = a.footprint[0].frame();
        let b = inst("b", frame.to_lonlat(4.0, 0.0), 2.5, 2.0);
        let assigned = assign_buildings(vec![b, a], &buildings());
        let (merged, groups, away) =
            merge_per_building(assigned, &lut(), &CalibrationModel::new(0.2)).unwrap();
        assert_eq!((merged.len(), groups, away), (1, 1, 1));
        let m = &merged[0];
        assert_eq!(m.id, "a");
        assert!((m.projected_area_m2 - 10.0).abs() < 1e-7);
        assert_eq!(m.footprint.len(), 2);
        assert!((m.capacity_kwp - 0.2 * m.surface_m2).abs() < 1e-12);
    }

    #[test]
    fn single_member_group_is_unchanged() {
        let a = assign_buildings(
            vec![inst("a", Point::new(3.0, 45.0), 2.5, 2.0)],
            &buildings(),
        );
        let (merged, _, _) =
            merge_per_building(a.clone(), &lut(), &CalibrationModel::new(0.2)).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn threshold_boundaries() {
        let t = Thresholds::default();
        let (kept, stats) = apply_thresholds(vec![with(1.0, 1.0)], &t);
        assert!(kept.is_empty());
        assert_eq!(stats.dropped_too_small, 1);
        assert_eq!(apply_thresholds(vec![with(1.7, 1.0)], &t).0.len(), 1);
        assert_eq!(apply_thresholds(vec![with(10.0, 36.0)], &t).0.len(), 1);
        let (kept, stats) = apply_thresholds(vec![with(10.0, 36.0001)], &t);
        assert!(kept.is_empty());
        assert_eq!(stats.dropped_too_large, 1);
    }

    #[test]
    fn filter_off_is_identity_for_in_range_items() {
        let input: Vec<_> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(k, id)| inst(id, Point::new(3.0 + 0.001 * k as f64, 45.0), 3.0, 2.0))
            .collect();
        let cfg = PostprocessConfig {
            enable_building_filter: false,
            ..Default::default()
        };
        let (kept, stats) = run_postprocess(
            input.clone(),
            None,
            &lut(),
            &CalibrationModel::new(0.2),
            &cfg,
        )
        .unwrap();
        assert_eq!(kept, input);
        assert!(stats.is_balanced());
    }

    #[test]
    fn filter_on_drops_off_building() {
        let input = vec![
            inst("on", Point::new(3.0, 45.0), 3.0, 2.0),
            inst("off", Point::new(3.005, 45.0), 3.0, 2.0),
        ];
        let b = buildings();
        let (kept, stats) = run_postprocess(
            input,
            Some(&b),
            &lut(),
            &CalibrationModel::new(0.2),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "on");
        assert_eq!(stats.dropped_no_building, 1);
        assert!(stats.is_balanced());
    }

    #[test]
    fn filter_on_without_buildings_errors() {
        let r = run_postprocess(
            Vec::new(),
            None,
            &lut(),
            &CalibrationModel::new(0.2),
            &Default::default(),
        );
        assert_eq!(r.unwrap_err(), PostprocessError::MissingBuildings);
    }
}
