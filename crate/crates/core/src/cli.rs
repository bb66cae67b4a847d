//! Command-line surface. Each subcommand reads local files, runs one stage
//! (or the whole chain for `run` and `simulate`) and writes its outputs plus
//! a run manifest recording parameters and input digests.
//!
//! Parameter precedence: command-line flags, then config-file values, then
//! built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::audit::{audit, CityIndex, DtaReport};
use crate::characteristics::{extract, fit_efficiency, CalibrationModel, Installation};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point, Polygon};
use crate::io::{self, IoError, MetadataRecord, PolygonKind};
use crate::lut::{build_lut, LutConfig, TiltLut, DEFAULT_CELL_SIZE_DEG, N_CLUSTERS};
use crate::postprocess::{
    apply_thresholds, run_postprocess, BuildingIndex, FilterStats, PostprocessConfig, Thresholds,
    DEFAULT_MAX_CAPACITY_KWP, DEFAULT_MIN_AREA_M2,
};
use crate::simulate::{run_end_to_end, GroundTruth, SimConfig, SimOutcome};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOG_ENV: &str = "PVDTA_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "pvdta",
    version,
    about = "Build PV installation registries from detection polygons and audit them against official per-city figures",
    after_help = "Defaults: min area 1.7 m², max capacity 36 kWp, LUT cell 0.5°, 4 surface clusters.\n\
                  Precedence: flags > config file > defaults. Log level via PVDTA_LOG (error|warn|info|debug)."
)]
pub struct Cli {
    /// Cap the number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tilt lookup table from installation metadata.
    BuildLut(BuildLutArgs),
    /// Fit the surface → capacity efficiency from installation metadata.
    Calibrate(CalibrateArgs),
    /// Turn detection polygons into installations.
    Extract(ExtractArgs),
    /// Building assignment, same-roof merge and size thresholds.
    Postprocess(PostprocessArgs),
    /// Compare installations with the registry, per city and per département.
    Audit(AuditArgs),
    /// Generate a synthetic dataset with known ground truth and audit it.
    Simulate(SimulateArgs),
    /// Chain extract → postprocess (with and without building filter) → audit.
    Run(RunArgs),
}

/// `lon1,lat1,lon2,lat2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBoxArg(pub BBox);

impl FromStr for BBoxArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v = parse_floats::<4>(s)?;
        if !(v[0] < v[2] && v[1] < v[3]) {
            return Err("expected lon1 < lon2 and lat1 < lat2".into());
        }
        Ok(BBoxArg(BBox::new(v[0], v[1], v[2], v[3])))
    }
}

/// `a,b,c`: three ascending projected-surface thresholds in m².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsArg(pub [f64; 3]);

impl FromStr for BoundsArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v = parse_floats::<3>(s)?;
        if !(v[0] < v[1] && v[1] < v[2]) {
            return Err("cluster bounds must be strictly ascending".into());
        }
        Ok(BoundsArg(v))
    }
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let arr: [f64; N] = parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated numbers"))?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(arr)
}

#[derive(Debug, Args)]
pub struct BuildLutArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CELL_SIZE_DEG)]
    pub cell_size_deg: f64,
    /// Grid extent `lon1,lat1,lon2,lat2` (default: extent of the metadata).
    #[arg(long)]
    pub bbox: Option<BBoxArg>,
    /// Explicit cluster thresholds `a,b,c` in m² (default: quartiles of the data).
    #[arg(long)]
    pub cluster_bounds: Option<BoundsArg>,
    /// Also write one CSV raster per cluster into this directory.
    #[arg(long, value_name = "DIR")]
    pub export_grid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[arg(long)]
    pub installations: PathBuf,
    #[arg(long, required_unless_present = "no_building_filter")]
    pub buildings: Option<PathBuf>,
    /// Skip building assignment and merging; apply only the size thresholds.
    #[arg(long)]
    pub no_building_filter: bool,
    /// Lut and calibration used to refresh merged installations.
    #[arg(long, required_unless_present = "no_building_filter")]
    pub lut: Option<PathBuf>,
    #[arg(long, required_unless_present = "no_building_filter")]
    pub calib: Option<PathBuf>,
    /// Drop installations with projected area below this (m²).
    #[arg(long, default_value_t = DEFAULT_MIN_AREA_M2)]
    pub min_area: f64,
    /// Drop installations with capacity above this (kWp).
    #[arg(long, default_value_t = DEFAULT_MAX_CAPACITY_KWP)]
    pub max_capacity: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub installations: PathBuf,
    /// Installations post-processed without the building filter; adds the
    /// unfiltered rows next to the filtered ones.
    #[arg(long)]
    pub unfiltered_installations: Option<PathBuf>,
    #[arg(long)]
    pub cities: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub summary: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML simulation config (default: built-in scene).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (default 1).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of true installations detected (default 1).
    #[arg(long)]
    pub recall: Option<f64>,
    /// False positives per true installation (default 0).
    #[arg(long)]
    pub false_positive_rate: Option<f64>,
    /// Share of false positives placed off buildings (default 0).
    #[arg(long)]
    pub off_building_rate: Option<f64>,
    /// σ of the lognormal area factor on detections (default 0).
    #[arg(long)]
    pub area_noise_sigma: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML pipeline config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Minimum projected area in m² (overrides config; default 1.7).
    #[arg(long)]
    pub min_area: Option<f64>,
    /// Maximum capacity in kWp (overrides config; default 36).
    #[arg(long)]
    pub max_capacity: Option<f64>,
}

/// Config file for `run`. Paths are relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub detections: PathBuf,
    pub buildings: PathBuf,
    pub cities: PathBuf,
    pub registry: PathBuf,
    /// Needed unless both `lut` and `calib` are given.
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default)]
    pub lut: Option<PathBuf>,
    #[serde(default)]
    pub calib: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub lut_build: LutSection,
    #[serde(default)]
    pub postprocess: ThresholdSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LutSection {
    pub cell_size_deg: Option<f64>,
    pub bbox: Option<[f64; 4]>,
    pub cluster_bounds: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub min_area_m2: Option<f64>,
    pub max_capacity_kwp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Seconds since the Unix epoch (`SOURCE_DATE_EPOCH` when set).
    pub timestamp: u64,
    pub params: Value,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, params: Value) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| {
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs())
            });
        Self {
            command: command.into(),
            version: VERSION.into(),
            timestamp,
            params,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.into(), digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.into(), digest(path)?);
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Runs a parsed command line; returns the manifest written.
pub fn execute(cli: &Cli) -> Result<RunManifest> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // Only the first call in a process can size the global pool.
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            warn!("thread pool already initialised; --threads ignored");
        }
    }
    let (manifest, default_path) = match &cli.command {
        Command::BuildLut(a) => (cmd_build_lut(a)?, with_suffix(&a.out, ".manifest.json")),
        Command::Calibrate(a) => (cmd_calibrate(a)?, with_suffix(&a.out, ".manifest.json")),
        Command::Extract(a) => (cmd_extract(a)?, with_suffix(&a.out, ".manifest.json")),
        Command::Postprocess(a) => (cmd_postprocess(a)?, with_suffix(&a.out, ".manifest.json")),
        Command::Audit(a) => (cmd_audit(a)?, with_suffix(&a.out, ".manifest.json")),
        Command::Simulate(a) => (cmd_simulate(a)?, a.out.join("manifest.json")),
        Command::Run(a) => {
            let (m, dir) = cmd_run(a)?;
            (m, dir.join("manifest.json"))
        }
    };
    let path = cli.manifest.clone().unwrap_or(default_path);
    io::write_json(&path, &manifest)?;
    info!("manifest written to {}", path.display());
    Ok(manifest)
}

fn metadata_records(path: &Path) -> Result<Vec<MetadataRecord>> {
    let table = io::read_metadata(path)?;
    for r in &table.rejects {
        warn!("{}: line {}: {}", path.display(), r.line, r.reason);
    }
    Ok(table.records)
}

fn metadata_extent(records: &[MetadataRecord]) -> Result<BBox> {
    let pts: Vec<Point> = records.iter().map(|r| Point::new(r.lon, r.lat)).collect();
    if pts.is_empty() {
        return Err(Error::Config("metadata has no valid records".into()));
    }
    Ok(BBox::of_points(&pts))
}

fn lut_from_metadata(records: &[MetadataRecord], config: &LutConfig) -> Result<TiltLut> {
    let built = build_lut(records, config)?;
    for (id, reason) in &built.rejects {
        warn!("metadata record {id}: {reason}");
    }
    Ok(built.lut)
}

fn cmd_build_lut(a: &BuildLutArgs) -> Result<RunManifest> {
    let records = metadata_records(&a.metadata)?;
    let bbox = match a.bbox {
        Some(b) => b.0,
        None => metadata_extent(&records)?,
    };
    let config = LutConfig {
        cell_size_deg: a.cell_size_deg,
        bbox,
        cluster_bounds: a.cluster_bounds.map(|b| b.0),
    };
    let lut = lut_from_metadata(&records, &config)?;
    io::write_json(&a.out, &lut)?;
    let mut m = RunManifest::new(
        "build-lut",
        json!({
            "cell_size_deg": a.cell_size_deg,
            "bbox": [bbox.min_lon, bbox.min_lat, bbox.max_lon, bbox.max_lat],
            "cluster_bounds": lut.cluster_bounds(),
            "n_clusters": N_CLUSTERS,
        }),
    );
    m.input("metadata", &a.metadata)?;
    m.output("lut", &a.out)?;
    if let Some(dir) = &a.export_grid {
        for c in 0..N_CLUSTERS as u8 {
            let path = dir.join(format!("tilt_cluster_{c}.csv"));
            io::write_file(&path, lut.export_grid_csv(c).as_bytes())?;
            m.output(&format!("grid_cluster_{c}"), &path)?;
        }
    }
    Ok(m)
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<RunManifest> {
    let records = metadata_records(&a.metadata)?;
    let calib = fit_efficiency(&records)?;
    io::write_json(&a.out, &calib)?;
    let mut m = RunManifest::new("calibrate", json!({}));
    m.input("metadata", &a.metadata)?;
    m.output("calib", &a.out)?;
    Ok(m)
}

/// Reads detections and extracts installations in parallel, keeping file order.
pub fn extract_file(
    path: &Path,
    lut: &TiltLut,
    calib: &CalibrationModel,
) -> Result<Vec<Installation>> {
    let set = io::read_polygons(path, PolygonKind::Detections)?;
    for r in &set.rejects {
        warn!(
            "{}: feature {}: {}",
            path.display(),
            r.feature_index,
            r.reason
        );
    }
    let out = set
        .records
        .into_par_iter()
        .map(|r| extract(r.id, r.polygon, lut, calib))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    info!(
        "extracted {} installations from {}",
        out.len(),
        path.display()
    );
    Ok(out)
}

fn cmd_extract(a: &ExtractArgs) -> Result<RunManifest> {
    let lut: TiltLut = io::read_json(&a.lut)?;
    let calib: CalibrationModel = io::read_json(&a.calib)?;
    let insts = extract_file(&a.detections, &lut, &calib)?;
    io::write_installations(&a.out, &insts)?;
    let mut m = RunManifest::new("extract", json!({}));
    m.input("detections", &a.detections)?;
    m.input("lut", &a.lut)?;
    m.input("calib", &a.calib)?;
    m.output("installations", &a.out)?;
    Ok(m)
}

pub fn building_index(path: &Path) -> Result<BuildingIndex> {
    let set = io::read_polygons(path, PolygonKind::Buildings)?;
    for r in &set.rejects {
        warn!(
            "{}: feature {}: {}",
            path.display(),
            r.feature_index,
            r.reason
        );
    }
    if set.records.is_empty() {
        return Err(Error::Config(format!(
            "{}: no valid building footprints",
            path.display()
        )));
    }
    Ok(BuildingIndex::new(
        set.records.into_iter().map(|r| (r.id, r.polygon)).collect(),
    )?)
}

fn cmd_postprocess(a: &PostprocessArgs) -> Result<RunManifest> {
    let insts = io::read_installations(&a.installations)?;
    let config = PostprocessConfig {
        enable_building_filter: !a.no_building_filter,
        thresholds: Thresholds {
            min_area_m2: a.min_area,
            max_capacity_kwp: a.max_capacity,
        },
    };
    let mut m = RunManifest::new(
        "postprocess",
        json!({
            "building_filter": config.enable_building_filter,
            "min_area_m2": a.min_area,
            "max_capacity_kwp": a.max_capacity,
        }),
    );
    m.input("installations", &a.installations)?;
    let (kept, stats) = if config.enable_building_filter {
        let (Some(b), Some(l), Some(c)) = (&a.buildings, &a.lut, &a.calib) else {
            return Err(Error::Usage(
                "--buildings, --lut and --calib are required with the building filter".into(),
            ));
        };
        let buildings = building_index(b)?;
        let lut: TiltLut = io::read_json(l)?;
        let calib: CalibrationModel = io::read_json(c)?;
        m.input("buildings", b)?;
        m.input("lut", l)?;
        m.input("calib", c)?;
        run_postprocess(insts, Some(&buildings), &lut, &calib, &config)?
    } else {
        // Thresholds alone never consult the LUT or the calibration.
        let n = insts.len();
        let (mut kept, mut stats) = apply_thresholds(insts, &config.thresholds);
        stats.input_count = n;
        kept.sort_by(|x, y| x.id.cmp(&y.id));
        (kept, stats)
    };
    check_stats(&stats)?;
    io::write_installations(&a.out, &kept)?;
    m.output("installations", &a.out)?;
    if let Some(s) = &a.stats {
        io::write_json(s, &stats)?;
        m.output("stats", s)?;
    }
    Ok(m)
}

fn check_stats(stats: &FilterStats) -> Result<()> {
    if stats.is_balanced() {
        Ok(())
    } else {
        Err(Error::Internal(format!(
            "filter statistics do not balance: {stats:?}"
        )))
    }
}

pub fn city_index(path: &Path) -> Result<CityIndex> {
    let (cities, rejects) = io::read_cities(path)?;
    for r in &rejects {
        warn!(
            "{}: feature {}: {}",
            path.display(),
            r.feature_index,
            r.reason
        );
    }
    Ok(CityIndex::new(cities)?)
}

fn registry_entries(path: &Path) -> Result<Vec<io::RegistryEntry>> {
    let table = io::read_registry(path)?;
    for r in &table.rejects {
        warn!("{}: line {}: {}", path.display(), r.line, r.reason);
    }
    Ok(table.records)
}

fn cmd_audit(a: &AuditArgs) -> Result<RunManifest> {
    let cities = city_index(&a.cities)?;
    let registry = registry_entries(&a.registry)?;
    let mut m = RunManifest::new(
        "audit",
        json!({ "unfiltered_variant": a.unfiltered_installations.is_some() }),
    );
    m.input("cities", &a.cities)?;
    m.input("registry", &a.registry)?;
    m.input("installations", &a.installations)?;
    let mut reports = vec![audit(
        io::read_installations(&a.installations)?,
        &cities,
        &registry,
        true,
    )?];
    if let Some(u) = &a.unfiltered_installations {
        reports.push(audit(
            io::read_installations(u)?,
            &cities,
            &registry,
            false,
        )?);
        m.input("unfiltered_installations", u)?;
    }
    io::write_report(&reports, &a.out, &a.summary)?;
    m.output("report", &a.out)?;
    m.output("summary", &a.summary)?;
    Ok(m)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<RunManifest> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| IoError::Io {
                path: p.clone(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let d = &mut cfg.detector;
    for (flag, slot) in [
        (a.recall, &mut d.recall),
        (a.false_positive_rate, &mut d.false_positive_rate),
        (a.off_building_rate, &mut d.off_building_rate),
        (a.area_noise_sigma, &mut d.area_noise_sigma),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let (gt, outcome) = run_end_to_end(&cfg)?;
    let params = serde_json::to_value(&cfg).map_err(|e| Error::Internal(e.to_string()))?;
    let mut m = RunManifest::new("simulate", params);
    if let Some(p) = &a.config {
        m.input("config", p)?;
    }
    write_dataset(&a.out, &cfg, &gt, &outcome, &mut m)?;
    Ok(m)
}

/// Writes the synthetic dataset, its reference outputs and a `pipeline.toml`
/// that re-runs the regular pipeline on it.
pub fn write_dataset(
    dir: &Path,
    cfg: &SimConfig,
    gt: &GroundTruth,
    out: &SimOutcome,
    m: &mut RunManifest,
) -> Result<()> {
    let config_toml = toml::to_string(cfg).map_err(|e| Error::Internal(e.to_string()))?;
    let files: Vec<(&str, PathBuf)> = [
        "sim_config.toml",
        "metadata.csv",
        "registry.csv",
        "cities.geojson",
        "buildings.geojson",
        "truth.geojson",
        "detections.geojson",
        "lut.json",
        "calib.json",
        "installations.geojson",
        "report.csv",
        "summary.json",
        "truth_errors.json",
        "pipeline.toml",
    ]
    .into_iter()
    .map(|f| (f, dir.join(f)))
    .collect();
    let path = |name: &str| {
        files
            .iter()
            .find(|(f, _)| *f == name)
            .expect("known file")
            .1
            .clone()
    };

    io::write_file(&path("sim_config.toml"), config_toml.as_bytes())?;
    io::write_metadata(&path("metadata.csv"), &gt.metadata)?;
    io::write_registry(&path("registry.csv"), &gt.registry)?;

    let props = |pairs: Vec<(&str, Value)>| -> Map<String, Value> {
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    };
    let cities: Vec<(Map<String, Value>, Vec<Polygon>)> = gt
        .cities
        .iter()
        .map(|c| {
            (
                props(vec![
                    ("city_code", json!(c.city_code)),
                    ("dept_code", json!(c.dept_code)),
                ]),
                c.parts.clone(),
            )
        })
        .collect();
    io::write_polygons(&path("cities.geojson"), &cities)?;
    let buildings: Vec<_> = gt
        .buildings
        .iter()
        .map(|(id, p)| (props(vec![("id", json!(id))]), vec![p.clone()]))
        .collect();
    io::write_polygons(&path("buildings.geojson"), &buildings)?;
    let truth: Vec<_> = gt
        .installations
        .iter()
        .map(|t| {
            (
                props(vec![
                    ("id", json!(t.id)),
                    ("building_id", json!(t.building_id)),
                    ("city_code", json!(t.city_code)),
                    ("projected_area_m2", json!(t.projected_area_m2)),
                    ("tilt_deg", json!(t.tilt_deg)),
                    ("surface_m2", json!(t.surface_m2)),
                    ("capacity_kwp", json!(t.capacity_kwp)),
                ]),
                vec![t.polygon.clone()],
            )
        })
        .collect();
    io::write_polygons(&path("truth.geojson"), &truth)?;
    let detections: Vec<_> = out
        .detections
        .iter()
        .map(|d| {
            (
                props(vec![
                    ("id", json!(d.id)),
                    ("true_positive", json!(d.true_positive)),
                    ("off_building", json!(d.off_building)),
                ]),
                vec![d.polygon.clone()],
            )
        })
        .collect();
    io::write_polygons(&path("detections.geojson"), &detections)?;
    io::write_json(&path("lut.json"), &out.lut)?;
    io::write_json(&path("calib.json"), &out.calibration)?;
    io::write_installations(&path("installations.geojson"), &out.installations)?;
    io::write_report(
        &[out.filtered.clone(), out.unfiltered.clone()],
        &path("report.csv"),
        &path("summary.json"),
    )?;
    io::write_json(&path("truth_errors.json"), &out.truth_errors)?;

    let bbox = cfg.mapping_bbox();
    let pipeline = PipelineConfig {
        detections: path("detections.geojson"),
        buildings: path("buildings.geojson"),
        cities: path("cities.geojson"),
        registry: path("registry.csv"),
        metadata: Some(path("metadata.csv")),
        lut: None,
        calib: None,
        out_dir: dir.join("run"),
        lut_build: LutSection {
            cell_size_deg: Some(cfg.lut_cell_size_deg),
            bbox: Some([bbox.min_lon, bbox.min_lat, bbox.max_lon, bbox.max_lat]),
            cluster_bounds: Some(cfg.tilt_field.cluster_bounds_m2),
        },
        postprocess: ThresholdSection {
            min_area_m2: Some(cfg.thresholds.min_area_m2),
            max_capacity_kwp: Some(cfg.thresholds.max_capacity_kwp),
        },
    };
    let pipeline_toml = toml::to_string(&pipeline).map_err(|e| Error::Internal(e.to_string()))?;
    io::write_file(&path("pipeline.toml"), pipeline_toml.as_bytes())?;

    for (name, p) in &files {
        m.output(name, p)?;
    }
    Ok(())
}

/// Everything `run` produces, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub lut: TiltLut,
    pub calibration: CalibrationModel,
    pub installations: Vec<Installation>,
    pub filtered: DtaReport,
    pub unfiltered: DtaReport,
    pub kept_filtered: Vec<Installation>,
    pub kept_unfiltered: Vec<Installation>,
}

/// Extract → postprocess with and without the building filter → audit.
pub fn run_pipeline(cfg: &PipelineConfig, thresholds: &Thresholds) -> Result<PipelineOutputs> {
    let records = match &cfg.metadata {
        Some(p) => Some(metadata_records(p)?),
        None => None,
    };
    let need = |what: &str| Error::Config(format!("`{what}` or `metadata` must be given"));
    let lut = match (&cfg.lut, &records) {
        (Some(p), _) => io::read_json(p)?,
        (None, Some(recs)) => {
            let bbox = match cfg.lut_build.bbox {
                Some(b) => BBox::new(b[0], b[1], b[2], b[3]),
                None => metadata_extent(recs)?,
            };
            let config = LutConfig {
                cell_size_deg: cfg.lut_build.cell_size_deg.unwrap_or(DEFAULT_CELL_SIZE_DEG),
                bbox,
                cluster_bounds: cfg.lut_build.cluster_bounds,
            };
            lut_from_metadata(recs, &config)?
        }
        (None, None) => return Err(need("lut")),
    };
    let calibration = match (&cfg.calib, &records) {
        (Some(p), _) => io::read_json(p)?,
        (None, Some(recs)) => fit_efficiency(recs)?,
        (None, None) => return Err(need("calib")),
    };
    let installations = extract_file(&cfg.detections, &lut, &calibration)?;
    let buildings = building_index(&cfg.buildings)?;
    let cities = city_index(&cfg.cities)?;
    let registry = registry_entries(&cfg.registry)?;

    let mut variants = Vec::with_capacity(2);
    for enable in [true, false] {
        let config = PostprocessConfig {
            enable_building_filter: enable,
            thresholds: *thresholds,
        };
        let (kept, stats) = run_postprocess(
            installations.clone(),
            Some(&buildings),
            &lut,
            &calibration,
            &config,
        )?;
        check_stats(&stats)?;
        let mut report = audit(kept.clone(), &cities, &registry, enable)?;
        report.filter_stats = Some(stats);
        variants.push((kept, report));
    }
    let (kept_unfiltered, unfiltered) = variants.pop().expect("two variants");
    let (kept_filtered, filtered) = variants.pop().expect("two variants");
    Ok(PipelineOutputs {
        lut,
        calibration,
        installations,
        filtered,
        unfiltered,
        kept_filtered,
        kept_unfiltered,
    })
}

pub fn read_pipeline_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_run(a: &RunArgs) -> Result<(RunManifest, PathBuf)> {
    let mut cfg = read_pipeline_config(&a.config)?;
    if let Some(dir) = &a.out {
        cfg.out_dir = dir.clone();
    }
    let thresholds = Thresholds {
        min_area_m2: a
            .min_area
            .or(cfg.postprocess.min_area_m2)
            .unwrap_or(DEFAULT_MIN_AREA_M2),
        max_capacity_kwp: a
            .max_capacity
            .or(cfg.postprocess.max_capacity_kwp)
            .unwrap_or(DEFAULT_MAX_CAPACITY_KWP),
    };
    let out = run_pipeline(&cfg, &thresholds)?;

    let dir = &cfg.out_dir;
    let files = [
        ("lut", dir.join("lut.json")),
        ("calib", dir.join("calib.json")),
        ("installations", dir.join("installations.geojson")),
        ("kept_filtered", dir.join("kept_filtered.geojson")),
        ("kept_unfiltered", dir.join("kept_unfiltered.geojson")),
        ("report", dir.join("report.csv")),
        ("summary", dir.join("summary.json")),
    ];
    io::write_json(&files[0].1, &out.lut)?;
    io::write_json(&files[1].1, &out.calibration)?;
    io::write_installations(&files[2].1, &out.installations)?;
    io::write_installations(&files[3].1, &out.kept_filtered)?;
    io::write_installations(&files[4].1, &out.kept_unfiltered)?;
    io::write_report(&[out.filtered, out.unfiltered], &files[5].1, &files[6].1)?;

    let lut_section = json!({
        "cell_size_deg": cfg.lut_build.cell_size_deg.unwrap_or(DEFAULT_CELL_SIZE_DEG),
        "bbox": cfg.lut_build.bbox,
        "cluster_bounds": out.lut.cluster_bounds(),
        "n_clusters": N_CLUSTERS,
    });
    let mut m = RunManifest::new(
        "run",
        json!({
            "out_dir": cfg.out_dir,
            "lut_build": lut_section,
            "min_area_m2": thresholds.min_area_m2,
            "max_capacity_kwp": thresholds.max_capacity_kwp,
            "variants": ["with_building_filter", "without_building_filter"],
        }),
    );
    m.input("config", &a.config)?;
    for (name, p) in [
        ("detections", Some(&cfg.detections)),
        ("buildings", Some(&cfg.buildings)),
        ("cities", Some(&cfg.cities)),
        ("registry", Some(&cfg.registry)),
        ("metadata", cfg.metadata.as_ref()),
        ("lut", cfg.lut.as_ref()),
        ("calib", cfg.calib.as_ref()),
    ] {
        if let Some(p) = p {
            m.input(name, p)?;
        }
    }
    for (name, p) in &files {
        m.output(name, p)?;
    }
    Ok((m, cfg.out_dir))
}

/// Prints an error to stderr, as JSON when requested, and returns the exit code.
pub fn report_error(err: &Error, json_errors: bool) -> i32 {
    let code = err.exit_code();
    if json_errors {
        let v = json!({ "error": err.kind(), "message": err.to_string(), "exit_code": code });
        eprintln!("{v}");
    } else {
        eprintln!("error: {err}");
    }
    code
}
