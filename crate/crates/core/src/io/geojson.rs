use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{json_error_offset, read_file, write_file, IoError};
use crate::characteristics::Installation;
use crate::geometry::{Point, Polygon};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolygonKind {
    Detections,
    Buildings,
    Cities,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonRecord {
    pub feature_index: usize,
    pub part_index: usize,
    pub id: String,
    pub properties: Map<String, Value>,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReject {
    pub feature_index: usize,
    /// `None` when the whole feature was unusable (null or non-polygonal geometry).
    pub part_index: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolygonSet {
    pub records: Vec<PolygonRecord>,
    pub rejects: Vec<FeatureReject>,
    pub feature_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityBoundary {
    pub city_code: String,
    pub dept_code: String,
    pub parts: Vec<Polygon>,
}

/// Polygon parts of one feature, each either valid or rejected with a reason.
type Parts = Vec<Result<Polygon, String>>;

struct RawFeature {
    index: usize,
    id: Option<String>,
    properties: Map<String, Value>,
    /// `Err` for a null or non-polygonal geometry.
    parts: Result<Parts, String>,
}

fn schema(context: &str, message: impl Into<String>) -> IoError {
    IoError::Schema {
        context: context.to_string(),
        message: message.into(),
    }
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_ring(v: &Value, context: &str, feature: usize) -> Result<Vec<Point>, IoError> {
    let arr = v
        .as_array()
        .ok_or_else(|| schema(context, format!("feature {feature}: ring is not an array")))?;
    arr.iter()
        .map(|pos| {
            let xy = pos.as_array().filter(|a| a.len() >= 2);
            match xy.and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?))) {
                Some((lon, lat)) => Ok(Point::new(lon, lat)),
                None => Err(schema(
                    context,
                    format!("feature {feature}: bad position {pos}"),
                )),
            }
        })
        .collect()
}

fn parse_polygon_coords(
    v: &Value,
    context: &str,
    feature: usize,
) -> Result<Result<Polygon, String>, IoError> {
    let rings = v.as_array().ok_or_else(|| {
        schema(
            context,
            format!("feature {feature}: polygon coordinates are not an array"),
        )
    })?;
    let Some((ext, holes)) = rings.split_first() else {
        return Ok(Err("polygon has no rings".to_string()));
    };
    let exterior = parse_ring(ext, context, feature)?;
    let holes = holes
        .iter()
        .map(|h| parse_ring(h, context, feature))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon::new(exterior, holes).map_err(|e| e.to_string()))
}

fn parse_geometry(
    geom: &Value,
    context: &str,
    feature: usize,
) -> Result<Result<Parts, String>, IoError> {
    if geom.is_null() {
        return Ok(Err("null geometry".into()));
    }
    let ty = geom.get("type").and_then(Value::as_str).unwrap_or("");
    let coords = geom.get("coordinates");
    match (ty, coords) {
        ("Polygon", Some(c)) => Ok(Ok(vec![parse_polygon_coords(c, context, feature)?])),
        ("MultiPolygon", Some(c)) => {
            let polys = c.as_array().ok_or_else(|| {
                schema(
                    context,
                    format!("feature {feature}: MultiPolygon coordinates are not an array"),
                )
            })?;
            let parts = polys
                .iter()
                .map(|p| parse_polygon_coords(p, context, feature))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Ok(parts))
        }
        ("Polygon" | "MultiPolygon", None) => Err(schema(
            context,
            format!("feature {feature}: geometry has no coordinates"),
        )),
        (other, _) => Ok(Err(format!("unsupported geometry type `{other}`"))),
    }
}

fn parse_raw(bytes: &[u8], context: &str) -> Result<Vec<RawFeature>, IoError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| IoError::Parse {
        context: context.to_string(),
        offset: json_error_offset(bytes, &e),
        message: e.to_string(),
    })?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(schema(
            context,
            "top-level object is not a FeatureCollection",
        ));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(context, "FeatureCollection has no `features` array"))?;
    features
        .iter()
        .enumerate()
        .map(|(index, f)| {
            if f.get("type").and_then(Value::as_str) != Some("Feature") {
                return Err(schema(
                    context,
                    format!("feature {index}: not a Feature object"),
                ));
            }
            let properties = match f.get("properties") {
                None | Some(Value::Null) => Map::new(),
                Some(Value::Object(m)) => m.clone(),
                Some(_) => {
                    return Err(schema(
                        context,
                        format!("feature {index}: properties is not an object"),
                    ))
                }
            };
            let geom = f.get("geometry").ok_or_else(|| {
                schema(context, format!("feature {index}: missing geometry member"))
            })?;
            let id = properties
                .get("id")
                .and_then(id_string)
                .or_else(|| f.get("id").and_then(id_string));
            Ok(RawFeature {
                index,
                id,
                properties,
                parts: parse_geometry(geom, context, index)?,
            })
        })
        .collect()
}

fn required_code(
    props: &Map<String, Value>,
    key: &str,
    feature_index: usize,
) -> Result<String, IoError> {
    props
        .get(key)
        .and_then(id_string)
        .ok_or_else(|| IoError::MissingProperty {
            feature_index,
            property: key.to_string(),
        })
}

/// Parses a FeatureCollection. MultiPolygons explode into one record per
/// part; invalid parts and non-polygonal features become rejects, so
/// `records + rejects` always accounts for every part of every feature.
pub fn parse_feature_collection(
    bytes: &[u8],
    context: &str,
    kind: PolygonKind,
) -> Result<PolygonSet, IoError> {
    let raw = parse_raw(bytes, context)?;
    let mut set = PolygonSet {
        feature_count: raw.len(),
        ..Default::default()
    };
    for f in raw {
        if kind == PolygonKind::Cities {
            required_code(&f.properties, "city_code", f.index)?;
            required_code(&f.properties, "dept_code", f.index)?;
        }
        let parts = match f.parts {
            Ok(parts) => parts,
            Err(reason) => {
                set.rejects.push(FeatureReject {
                    feature_index: f.index,
                    part_index: None,
                    reason,
                });
                continue;
            }
        };
        let base_id = f.id.unwrap_or_else(|| f.index.to_string());
        let multi = parts.len() > 1;
        for (part_index, part) in parts.into_iter().enumerate() {
            match part {
                Ok(polygon) => {
                    let id = if multi && kind == PolygonKind::Detections {
                        format!("{base_id}.{part_index}")
                    } else {
                        base_id.clone()
                    };
                    set.records.push(PolygonRecord {
                        feature_index: f.index,
                        part_index,
                        id,
                        properties: f.properties.clone(),
                        polygon,
                    });
                }
                Err(reason) => set.rejects.push(FeatureReject {
                    feature_index: f.index,
                    part_index: Some(part_index),
                    reason,
                }),
            }
        }
    }
    Ok(set)
}

pub fn read_polygons(path: &Path, kind: PolygonKind) -> Result<PolygonSet, IoError> {
    let bytes = read_file(path)?;
    parse_feature_collection(&bytes, &path.display().to_string(), kind)
}

/// City boundaries grouped by `city_code`; parts of the same city may come
/// from several features but must agree on `dept_code`.
pub fn read_cities(path: &Path) -> Result<(Vec<CityBoundary>, Vec<FeatureReject>), IoError> {
    let set = read_polygons(path, PolygonKind::Cities)?;
    let context = path.display().to_string();
    let mut cities: BTreeMap<String, CityBoundary> = BTreeMap::new();
    for r in set.records {
        let city_code = required_code(&r.properties, "city_code", r.feature_index)?;
        let dept_code = required_code(&r.properties, "dept_code", r.feature_index)?;
        let entry = cities
            .entry(city_code.clone())
            .or_insert_with(|| CityBoundary {
                city_code: city_code.clone(),
                dept_code: dept_code.clone(),
                parts: Vec::new(),
            });
        if entry.dept_code != dept_code {
            return Err(schema(
                &context,
                format!(
                    "city {city_code} listed under départements {} and {dept_code}",
                    entry.dept_code
                ),
            ));
        }
        entry.parts.push(r.polygon);
    }
    Ok((cities.into_values().collect(), set.rejects))
}

fn ring_coords(ring: &[Point]) -> Value {
    let mut coords: Vec<Value> = ring.iter().map(|p| json!([p.lon, p.lat])).collect();
    coords.push(json!([ring[0].lon, ring[0].lat]));
    Value::Array(coords)
}

fn polygon_coords(p: &Polygon) -> Value {
    Value::Array(p.rings().map(ring_coords).collect())
}

fn geometry(parts: &[Polygon]) -> Value {
    match parts {
        [single] => json!({"type": "Polygon", "coordinates": polygon_coords(single)}),
        many => json!({
            "type": "MultiPolygon",
            "coordinates": Value::Array(many.iter().map(polygon_coords).collect()),
        }),
    }
}

fn collection(features: Vec<Value>) -> Vec<u8> {
    let mut bytes =
        serde_json::to_vec_pretty(&json!({"type": "FeatureCollection", "features": features}))
            .expect("serializing a JSON value cannot fail");
    bytes.push(b'\n');
    bytes
}

/// Writes one feature per entry; multiple polygons become a MultiPolygon.
pub fn write_polygons(
    path: &Path,
    features: &[(Map<String, Value>, Vec<Polygon>)],
) -> Result<(), IoError> {
    let values = features
        .iter()
        .map(|(props, parts)| json!({"type": "Feature", "properties": props, "geometry": geometry(parts)}))
        .collect();
    write_file(path, &collection(values))
}

pub fn write_installations(path: &Path, installations: &[Installation]) -> Result<(), IoError> {
    let values = installations
        .iter()
        .map(|i| {
            json!({
                "type": "Feature",
                "properties": {
                    "id": i.id,
                    "lon": i.location.lon,
                    "lat": i.location.lat,
                    "projected_area_m2": i.projected_area_m2,
                    "tilt_deg": i.tilt_deg,
                    "surface_m2": i.surface_m2,
                    "capacity_kwp": i.capacity_kwp,
                    "building_id": i.building_id,
                    "city_code": i.city_code,
                    "dept_code": i.dept_code,
                },
                "geometry": geometry(&i.footprint),
            })
        })
        .collect();
    write_file(path, &collection(values))
}

/// Reads installations written by [`write_installations`]. Unlike the raw
/// polygon readers this is strict: any invalid feature is an error.
pub fn read_installations(path: &Path) -> Result<Vec<Installation>, IoError> {
    let bytes = read_file(path)?;
    let context = path.display().to_string();
    let raw = parse_raw(&bytes, &context)?;
    raw.into_iter()
        .map(|f| {
            let parts = f
                .parts
                .map_err(|reason| schema(&context, format!("feature {}: {reason}", f.index)))?;
            let footprint = parts
                .into_iter()
                .collect::<Result<Vec<_>, _>>()
                .map_err(|reason| schema(&context, format!("feature {}: {reason}", f.index)))?;
            let num = |key: &str| {
                f.properties
                    .get(key)
                    .and_then(Value::as_f64)
                    .ok_or_else(|| IoError::MissingProperty {
                        feature_index: f.index,
                        property: key.to_string(),
                    })
            };
            let opt = |key: &str| f.properties.get(key).and_then(id_string);
            Ok(Installation {
                id: f.id.ok_or_else(|| IoError::MissingProperty {
                    feature_index: f.index,
                    property: "id".into(),
                })?,
                location: Point::new(num("lon")?, num("lat")?),
                projected_area_m2: num("projected_area_m2")?,
                tilt_deg: num("tilt_deg")?,
                surface_m2: num("surface_m2")?,
                capacity_kwp: num("capacity_kwp")?,
                building_id: opt("building_id"),
                city_code: opt("city_code"),
                dept_code: opt("dept_code"),
                footprint,
            })
        })
        .collect()
}
