//! City-wise aggregation and downstream-task accuracy (DTA) metrics.
//!
//! Detections are aggregated per city and compared with a registry that
//! holds, for every city `i`, the installation count `k` and total capacity
//! `C`. With estimates `k̂` and `Ĉ`:
//!
//! * APE   = |C − Ĉ| / C
//! * Δ     = k̂ / k
//! * AIPE  = −(C/k − Ĉ/k̂) / (C/k), negative when installations are sized too small
//!
//! Metrics are fractions internally. Reports average them over cities,
//! unweighted, per département and overall, and express them in percent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::Installation;
use crate::geometry::{BBox, GeometryError, Polygon, SpatialIndex};
use crate::io::{CityBoundary, RegistryEntry};
use crate::lut::neumaier_sum;
use crate::postprocess::FilterStats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("reference count or capacity is zero (k = {k}, C = {c_kwp})")]
    UndefinedReference { k: u64, c_kwp: f64 },
    #[error("no comparable cities")]
    EmptyComparisonSet,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// Registry lists `k = 0` or `C = 0`.
    ZeroReference,
    /// Detections fall in a city the registry does not list.
    NotInRegistry,
    /// Registry city not covered by the supplied city boundaries.
    OutsideMappingArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityAggregate {
    pub city_code: String,
    pub dept_code: String,
    pub k_hat: u64,
    pub c_hat_kwp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CityMetrics {
    pub ape: f64,
    pub ratio: f64,
    /// Undefined when nothing was detected in the city.
    pub aipe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityComparison {
    pub city_code: String,
    pub dept_code: String,
    pub k: u64,
    pub k_hat: u64,
    pub c_kwp: f64,
    pub c_hat_kwp: f64,
    pub ape: f64,
    pub ratio: f64,
    pub aipe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCity {
    pub city_code: String,
    pub dept_code: String,
    pub reason: ExclusionReason,
    pub k: u64,
    pub k_hat: u64,
    pub c_kwp: f64,
    pub c_hat_kwp: f64,
}

/// One row of the report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeptMetrics {
    pub mape_pct: f64,
    pub median_ape_pct: f64,
    pub mean_ratio: f64,
    pub mean_aipe_pct: Option<f64>,
    pub k: u64,
    pub k_hat: u64,
    pub c_kwp: f64,
    pub c_hat_kwp: f64,
    pub n_cities: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtaReport {
    /// Whether detections went through the building filter.
    pub filtered: bool,
    pub per_dept: BTreeMap<String, DeptMetrics>,
    pub overall: Option<DeptMetrics>,
    pub cities: Vec<CityComparison>,
    pub excluded_cities: Vec<ExcludedCity>,
    /// Installations whose location lies in no city boundary.
    pub unassigned_installations: u64,
    pub unassigned_capacity_kwp: f64,
    pub filter_stats: Option<FilterStats>,
}

impl DtaReport {
    pub fn empty(filtered: bool) -> Self {
        Self {
            filtered,
            per_dept: BTreeMap::new(),
            overall: None,
            cities: Vec::new(),
            excluded_cities: Vec::new(),
            unassigned_installations: 0,
            unassigned_capacity_kwp: 0.0,
            filter_stats: None,
        }
    }
}

/// City boundaries indexed for point-in-polygon assignment.
#[derive(Debug, Clone)]
pub struct CityIndex {
    cities: Vec<CityBoundary>,
    parts: Vec<(usize, Polygon)>,
    index: SpatialIndex,
}

impl CityIndex {
    pub fn new(mut cities: Vec<CityBoundary>) -> Result<Self, GeometryError> {
        cities.sort_by(|a, b| a.city_code.cmp(&b.city_code));
        let parts: Vec<(usize, Polygon)> = cities
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.parts.iter().map(move |p| (i, p.clone())))
            .collect();
        let index = SpatialIndex::from_polygons(parts.iter().map(|(_, p)| p))?;
        Ok(Self {
            cities,
            parts,
            index,
        })
    }

    pub fn cities(&self) -> &[CityBoundary] {
        &self.cities
    }

    pub fn codes(&self) -> BTreeSet<String> {
        self.cities.iter().map(|c| c.city_code.clone()).collect()
    }

    /// Containing city; on shared borders the lowest city code wins.
    pub fn locate(&self, pt: crate::geometry::Point) -> Option<&CityBoundary> {
        let q = BBox::new(pt.lon, pt.lat, pt.lon, pt.lat);
        self.index
            .query(&q)
            .into_iter()
            .filter(|&pos| self.parts[pos].1.contains_point(pt))
            .map(|pos| self.parts[pos].0)
            .min()
            .map(|i| &self.cities[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityAssignment {
    pub assigned: Vec<Installation>,
    pub outside: Vec<Installation>,
}

pub fn assign_cities(installations: Vec<Installation>, cities: &CityIndex) -> CityAssignment {
    use rayon::prelude::*;
    let located: Vec<Installation> = installations
        .into_par_iter()
        .map(|mut inst| {
            let city = cities.locate(inst.location);
            inst.city_code = city.map(|c| c.city_code.clone());
            inst.dept_code = city.map(|c| c.dept_code.clone());
            inst
        })
        .collect();
    let (assigned, outside) = located.into_iter().partition(|i| i.city_code.is_some());
    CityAssignment { assigned, outside }
}

/// Per-city count and capacity, summed in installation-id order. Output is
/// sorted by city code; installations without a city are ignored.
pub fn aggregate(installations: &[Installation]) -> Vec<CityAggregate> {
    let mut by_city: BTreeMap<&str, Vec<&Installation>> = BTreeMap::new();
    for inst in installations {
        if let Some(code) = inst.city_code.as_deref() {
            by_city.entry(code).or_default().push(inst);
        }
    }
    by_city
        .into_iter()
        .map(|(code, mut members)| {
            members.sort_by(|a, b| a.id.cmp(&b.id));
            CityAggregate {
                city_code: code.to_string(),
                dept_code: members[0].dept_code.clone().unwrap_or_default(),
                k_hat: members.len() as u64,
                c_hat_kwp: members.iter().map(|m| m.capacity_kwp).sum(),
            }
        })
        .collect()
}

pub fn compare_city(
    k: u64,
    c_kwp: f64,
    k_hat: u64,
    c_hat_kwp: f64,
) -> Result<CityMetrics, AuditError> {
    if k == 0 || c_kwp <= 0.0 {
        return Err(AuditError::UndefinedReference { k, c_kwp });
    }
    let ape = (c_kwp - c_hat_kwp).abs() / c_kwp;
    let ratio = k_hat as f64 / k as f64;
    let aipe = (k_hat > 0).then(|| {
        let reference = c_kwp / k as f64;
        let estimate = c_hat_kwp / k_hat as f64;
        -((reference - estimate) / reference)
    });
    Ok(CityMetrics { ape, ratio, aipe })
}

/// Joins city aggregates with the registry. Registry cities with no detection
/// are compared with `k̂ = 0, Ĉ = 0`. When `mapped` is given, registry cities
/// outside it are excluded.
pub fn join_registry(
    aggregates: &[CityAggregate],
    registry: &[RegistryEntry],
    mapped: Option<&BTreeSet<String>>,
) -> (Vec<CityComparison>, Vec<ExcludedCity>) {
    let agg: BTreeMap<&str, &CityAggregate> = aggregates
        .iter()
        .map(|a| (a.city_code.as_str(), a))
        .collect();
    let mut reg: Vec<&RegistryEntry> = registry.iter().collect();
    reg.sort_by(|a, b| a.city_code.cmp(&b.city_code));

    let mut comparisons = Vec::new();
    let mut excluded = Vec::new();
    for r in &reg {
        let (k_hat, c_hat_kwp) = agg
            .get(r.city_code.as_str())
            .map_or((0, 0.0), |a| (a.k_hat, a.c_hat_kwp));
        let exclude = |reason| ExcludedCity {
            city_code: r.city_code.clone(),
            dept_code: r.dept_code.clone(),
            reason,
            k: r.count,
            k_hat,
            c_kwp: r.capacity_kwp,
            c_hat_kwp,
        };
        if mapped.is_some_and(|m| !m.contains(&r.city_code)) {
            excluded.push(exclude(ExclusionReason::OutsideMappingArea));
            continue;
        }
        match compare_city(r.count, r.capacity_kwp, k_hat, c_hat_kwp) {
            Ok(m) => comparisons.push(CityComparison {
                city_code: r.city_code.clone(),
                dept_code: r.dept_code.clone(),
                k: r.count,
                k_hat,
                c_kwp: r.capacity_kwp,
                c_hat_kwp,
                ape: m.ape,
                ratio: m.ratio,
                aipe: m.aipe,
            }),
            Err(_) => excluded.push(exclude(ExclusionReason::ZeroReference)),
        }
    }
    let listed: BTreeSet<&str> = reg.iter().map(|r| r.city_code.as_str()).collect();
    for a in aggregates
        .iter()
        .filter(|a| !listed.contains(a.city_code.as_str()))
    {
        excluded.push(ExcludedCity {
            city_code: a.city_code.clone(),
            dept_code: a.dept_code.clone(),
            reason: ExclusionReason::NotInRegistry,
            k: 0,
            k_hat: a.k_hat,
            c_kwp: 0.0,
            c_hat_kwp: a.c_hat_kwp,
        });
    }
    excluded.sort_by(|a, b| a.city_code.cmp(&b.city_code));
    (comparisons, excluded)
}

/// Median of a non-empty slice; even counts average the middle pair.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(cities: &[&CityComparison], n_excluded: usize) -> DeptMetrics {
    let n = cities.len() as f64;
    let mut apes: Vec<f64> = cities.iter().map(|c| c.ape).collect();
    let mape = neumaier_sum(apes.iter().copied()) / n;
    let mean_ratio = neumaier_sum(cities.iter().map(|c| c.ratio)) / n;
    let aipes: Vec<f64> = cities.iter().filter_map(|c| c.aipe).collect();
    let mean_aipe =
        (!aipes.is_empty()).then(|| neumaier_sum(aipes.iter().copied()) / aipes.len() as f64);
    DeptMetrics {
        mape_pct: 100.0 * mape,
        median_ape_pct: 100.0 * median(&mut apes),
        mean_ratio,
        mean_aipe_pct: mean_aipe.map(|a| 100.0 * a),
        k: cities.iter().map(|c| c.k).sum(),
        k_hat: cities.iter().map(|c| c.k_hat).sum(),
        c_kwp: neumaier_sum(cities.iter().map(|c| c.c_kwp)),
        c_hat_kwp: neumaier_sum(cities.iter().map(|c| c.c_hat_kwp)),
        n_cities: cities.len(),
        n_excluded,
    }
}

pub fn build_report(
    mut comparisons: Vec<CityComparison>,
    excluded: Vec<ExcludedCity>,
    filtered: bool,
) -> Result<DtaReport, AuditError> {
    if comparisons.is_empty() {
        return Err(AuditError::EmptyComparisonSet);
    }
    comparisons.sort_by(|a, b| a.city_code.cmp(&b.city_code));
    let mut by_dept: BTreeMap<&str, Vec<&CityComparison>> = BTreeMap::new();
    for c in &comparisons {
        by_dept.entry(c.dept_code.as_str()).or_default().push(c);
    }
    let mut excluded_per_dept: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &excluded {
        *excluded_per_dept.entry(e.dept_code.as_str()).or_default() += 1;
    }
    let per_dept = by_dept
        .iter()
        .map(|(dept, cities)| {
            let n_ex = excluded_per_dept.get(dept).copied().unwrap_or(0);
            (dept.to_string(), summarize(cities, n_ex))
        })
        .collect();
    let all: Vec<&CityComparison> = comparisons.iter().collect();
    let overall = summarize(&all, excluded.len());
    Ok(DtaReport {
        filtered,
        per_dept,
        overall: Some(overall),
        cities: comparisons,
        excluded_cities: excluded,
        unassigned_installations: 0,
        unassigned_capacity_kwp: 0.0,
        filter_stats: None,
    })
}

/// Full audit of already post-processed installations.
pub fn audit(
    installations: Vec<Installation>,
    cities: &CityIndex,
    registry: &[RegistryEntry],
    filtered: bool,
) -> Result<DtaReport, AuditError> {
    let CityAssignment { assigned, outside } = assign_cities(installations, cities);
    let aggregates = aggregate(&assigned);
    let codes = cities.codes();
    let (comparisons, excluded) = join_registry(&aggregates, registry, Some(&codes));
    let mut report = build_report(comparisons, excluded, filtered)?;
    report.unassigned_installations = outside.len() as u64;
    report.unassigned_capacity_kwp = outside.iter().map(|i| i.capacity_kwp).sum();
    Ok(report)
}
