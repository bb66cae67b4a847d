//! Polygon math on WGS84 lon/lat coordinates.
//!
//! Metric quantities (area, centroid) are computed in a local tangent plane
//! centred on the polygon's bounding box, where
//! `x = R·Δlon·cos(lat₀)` and `y = R·Δlat` (radians). For rooftop-sized
//! polygons the planar error is far below segmentation noise.
//!
//! Topological predicates (`intersects`, `point_in_polygon`) work directly on
//! lon/lat: the local projection is affine, so it does not change their answer.

mod index;

pub use index::SpatialIndex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// IUGG mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("coordinate out of range or not finite: ({lon}, {lat})")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("ring {ring} self-intersects")]
    SelfIntersection { ring: usize },
    #[error("hole {hole} is not inside the exterior ring")]
    HoleOutside { hole: usize },
    #[error("cannot build a spatial index from zero items")]
    EmptyIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lon: f64,
    pub lat: f64,
}

impl Point {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }

    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

/// Axis-aligned box in lon/lat degrees. Edges are closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        Self {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        }
    }

    pub fn of_points(points: &[Point]) -> Self {
        let mut b = BBox::new(
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for p in points {
            b.min_lon = b.min_lon.min(p.lon);
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lon = b.max_lon.max(p.lon);
            b.max_lat = b.max_lat.max(p.lat);
        }
        b
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.min_lon.min(other.min_lon),
            self.min_lat.min(other.min_lat),
            self.max_lon.max(other.max_lon),
            self.max_lat.max(other.max_lat),
        )
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
            && self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
    }

    pub fn contains_point(&self, p: Point) -> bool {
        (self.min_lon..=self.max_lon).contains(&p.lon)
            && (self.min_lat..=self.max_lat).contains(&p.lat)
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min_lon + self.max_lon),
            0.5 * (self.min_lat + self.max_lat),
        )
    }
}

/// Equirectangular tangent frame anchored at a reference point.
///
/// Within a frame the mapping lon/lat ↔ metres is affine, so centroids and
/// area ratios survive the round trip exactly (up to rounding).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    origin: Point,
    m_per_deg_lon: f64,
    m_per_deg_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: Point) -> Self {
        let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self {
            origin,
            m_per_deg_lon: m_per_deg_lat * origin.lat.to_radians().cos(),
            m_per_deg_lat,
        }
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn to_local(&self, p: Point) -> (f64, f64) {
        let mut dlon = p.lon - self.origin.lon;
        if dlon > 180.0 {
            dlon -= 360.0;
        } else if dlon < -180.0 {
            dlon += 360.0;
        }
        (
            dlon * self.m_per_deg_lon,
            (p.lat - self.origin.lat) * self.m_per_deg_lat,
        )
    }

    pub fn to_lonlat(&self, x: f64, y: f64) -> Point {
        Point::new(
            self.origin.lon + x / self.m_per_deg_lon,
            self.origin.lat + y / self.m_per_deg_lat,
        )
    }
}

/// A validated simple polygon with optional holes. Rings are stored open
/// (the closing vertex is implicit) and free of consecutive duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
    bbox: BBox,
}

impl Polygon {
    /// Validates and normalises the rings. Self-intersecting rings are
    /// rejected rather than repaired.
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Self, GeometryError> {
        let exterior = normalize_ring(exterior, 0)?;
        let holes = holes
            .into_iter()
            .enumerate()
            .map(|(i, h)| normalize_ring(h, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, hole) in holes.iter().enumerate() {
            if !hole.iter().all(|&p| ring_contains(&exterior, p)) {
                return Err(GeometryError::HoleOutside { hole: i });
            }
        }
        let bbox = BBox::of_points(&exterior);
        Ok(Self {
            exterior,
            holes,
            bbox,
        })
    }

    pub fn simple(exterior: Vec<Point>) -> Result<Self, GeometryError> {
        Self::new(exterior, Vec::new())
    }

    /// Builds a polygon from vertices given in metres in `frame`.
    pub fn from_local(frame: &LocalFrame, ring: &[(f64, f64)]) -> Result<Self, GeometryError> {
        Self::simple(ring.iter().map(|&(x, y)| frame.to_lonlat(x, y)).collect())
    }

    /// Axis-aligned rectangle of `width_m` × `height_m` centred on `center`.
    pub fn rectangle(center: Point, width_m: f64, height_m: f64) -> Result<Self, GeometryError> {
        let frame = LocalFrame::new(center);
        let (hw, hh) = (0.5 * width_m, 0.5 * height_m);
        Self::from_local(&frame, &[(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    /// Tangent frame used for all metric computations on this polygon.
    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.bbox.center())
    }

    /// Horizontal (projected) area in m². Holes subtract.
    pub fn area_m2(&self) -> f64 {
        let frame = self.frame();
        let ext = ring_moments(&frame, &self.exterior).0.abs();
        let holes: f64 = self
            .holes
            .iter()
            .map(|h| ring_moments(&frame, h).0.abs())
            .sum();
        (ext - holes).max(0.0)
    }

    /// Area-weighted centroid, computed in the tangent frame.
    pub fn centroid(&self) -> Point {
        let frame = self.frame();
        let (mut area, mut mx, mut my) = oriented_moments(&frame, &self.exterior);
        for h in &self.holes {
            let (a, x, y) = oriented_moments(&frame, h);
            area -= a;
            mx -= x;
            my -= y;
        }
        frame.to_lonlat(mx / area, my / area)
    }

    /// Even-odd containment; points on any ring boundary count as inside.
    pub fn contains_point(&self, p: Point) -> bool {
        if !self.bbox.contains_point(p) {
            return false;
        }
        if self.rings().any(|r| on_ring_boundary(r, p)) {
            return true;
        }
        let mut inside = false;
        for ring in self.rings() {
            if crossing_parity(ring, p) {
                inside = !inside;
            }
        }
        inside
    }

    /// True iff the closed polygons share at least one point.
    pub fn intersects(&self, other: &Polygon) -> bool {
        if !self.bbox.intersects(&other.bbox) {
            return false;
        }
        for ra in self.rings() {
            for (a0, a1) in edges(ra) {
                let ea = BBox::of_points(&[a0, a1]);
                if !ea.intersects(&other.bbox) {
                    continue;
                }
                for rb in other.rings() {
                    for (b0, b1) in edges(rb) {
                        if ea.intersects(&BBox::of_points(&[b0, b1]))
                            && segments_intersect(a0, a1, b0, b1)
                        {
                            return true;
                        }
                    }
                }
            }
        }
        other.contains_point(self.exterior[0]) || self.contains_point(other.exterior[0])
    }
}

/// Projected area of `p` in m².
pub fn polygon_area_m2(p: &Polygon) -> f64 {
    p.area_m2()
}

pub fn centroid(p: &Polygon) -> Point {
    p.centroid()
}

pub fn intersects(a: &Polygon, b: &Polygon) -> bool {
    a.intersects(b)
}

pub fn point_in_polygon(pt: Point, p: &Polygon) -> bool {
    p.contains_point(pt)
}

fn normalize_ring(mut ring: Vec<Point>, ring_idx: usize) -> Result<Vec<Point>, GeometryError> {
    if let Some(bad) = ring.iter().find(|p| !p.is_valid()) {
        return Err(GeometryError::InvalidCoordinate {
            lon: bad.lon,
            lat: bad.lat,
        });
    }
    ring.dedup();
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "ring {ring_idx} has fewer than 3 distinct vertices"
        )));
    }
    let bbox = BBox::of_points(&ring);
    if bbox.min_lon == bbox.max_lon || bbox.min_lat == bbox.max_lat {
        return Err(GeometryError::Degenerate(format!(
            "ring {ring_idx} has zero extent"
        )));
    }
    let origin = ring[0];
    let twice_area: f64 = edges(&ring)
        .map(|(a, b)| {
            (a.lon - origin.lon) * (b.lat - origin.lat)
                - (b.lon - origin.lon) * (a.lat - origin.lat)
        })
        .sum();
    if ring.iter().all(|&p| orient(ring[0], ring[1], p) == 0.0) {
        return Err(GeometryError::Degenerate(format!(
            "ring {ring_idx} is collinear"
        )));
    }
    if ring_self_intersects(&ring) {
        return Err(GeometryError::SelfIntersection { ring: ring_idx });
    }
    if twice_area == 0.0 {
        return Err(GeometryError::Degenerate(format!(
            "ring {ring_idx} has zero area"
        )));
    }
    Ok(ring)
}

fn ring_self_intersects(ring: &[Point]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a0, a1) = (ring[i], ring[(i + 1) % n]);
        // Spike: the next edge folds back along this one.
        let a2 = ring[(i + 2) % n];
        if orient(a0, a1, a2) == 0.0 && dot(a0, a1, a2) > 0.0 {
            return true;
        }
        let ea = BBox::of_points(&[a0, a1]);
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (b0, b1) = (ring[j], ring[(j + 1) % n]);
            if ea.intersects(&BBox::of_points(&[b0, b1])) && segments_intersect(a0, a1, b0, b1) {
                return true;
            }
        }
    }
    false
}

fn edges(ring: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = ring.len();
    (0..n).map(move |i| (ring[i], ring[(i + 1) % n]))
}

/// Signed area and signed first moments of a ring in the frame.
fn ring_moments(frame: &LocalFrame, ring: &[Point]) -> (f64, f64, f64) {
    let pts: Vec<(f64, f64)> = ring.iter().map(|&p| frame.to_local(p)).collect();
    let n = pts.len();
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        a2 += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    (0.5 * a2, cx / 6.0, cy / 6.0)
}

/// Moments normalised to positive orientation.
fn oriented_moments(frame: &LocalFrame, ring: &[Point]) -> (f64, f64, f64) {
    let (a, x, y) = ring_moments(frame, ring);
    if a < 0.0 {
        (-a, -x, -y)
    } else {
        (a, x, y)
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

/// (a - b) · (c - b)
fn dot(a: Point, b: Point, c: Point) -> f64 {
    (a.lon - b.lon) * (c.lon - b.lon) + (a.lat - b.lat) * (c.lat - b.lat)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    orient(a, b, p) == 0.0
        && p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

/// Closed-segment intersection test, collinear overlaps included.
pub(crate) fn segments_intersect(a0: Point, a1: Point, b0: Point, b1: Point) -> bool {
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b0, b1, a0))
        || (d2 == 0.0 && on_segment(b0, b1, a1))
        || (d3 == 0.0 && on_segment(a0, a1, b0))
        || (d4 == 0.0 && on_segment(a0, a1, b1))
}

fn on_ring_boundary(ring: &[Point], p: Point) -> bool {
    edges(ring).any(|(a, b)| on_segment(a, b, p))
}

/// Ray casting towards +lon; half-open vertex rule.
fn crossing_parity(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    for (a, b) in edges(ring) {
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn ring_contains(ring: &[Point], p: Point) -> bool {
    on_ring_boundary(ring, p) || crossing_parity(ring, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deg_per_m() -> f64 {
        180.0 / (std::f64::consts::PI * EARTH_RADIUS_M)
    }

    fn square(lon: f64, lat: f64, side_deg: f64) -> Polygon {
        Polygon::simple(vec![
            Point::new(lon, lat),
            Point::new(lon + side_deg, lat),
            Point::new(lon + side_deg, lat + side_deg),
            Point::new(lon, lat + side_deg),
        ])
        .unwrap()
    }

    #[test]
    fn ten_metre_square_at_equator() {
        let d = 10.0 * deg_per_m();
        let sq = square(0.0, 0.0, d);
        let area = sq.area_m2();
        assert!((area - 100.0).abs() / 100.0 < 1e-6, "{area}");
    }

    #[test]
    fn rotated_square_keeps_area() {
        let frame = LocalFrame::new(Point::new(0.0, 0.0));
        let t = 37f64.to_radians();
        let corners = [(-5.0, -5.0), (5.0, -5.0), (5.0, 5.0), (-5.0, 5.0)];
        let rotated: Vec<(f64, f64)> = corners
            .iter()
            .map(|&(x, y)| (x * t.cos() - y * t.sin(), x * t.sin() + y * t.cos()))
            .collect();
        let p = Polygon::from_local(&frame, &rotated).unwrap();
        assert!((p.area_m2() - 100.0).abs() / 100.0 < 1e-6);
    }

    #[test]
    fn centroid_of_small_square() {
        let c = square(0.0, 0.0, 0.001).centroid();
        assert!((c.lon - 0.0005).abs() < 1e-9);
        assert!((c.lat - 0.0005).abs() < 1e-9);
    }

    #[test]
    fn centroid_of_triangle_is_vertex_mean() {
        let t = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(0.003, 0.0),
            Point::new(0.0, 0.003),
        ])
        .unwrap();
        let c = t.centroid();
        assert!((c.lon - 0.001).abs() < 1e-9);
        assert!((c.lat - 0.001).abs() < 1e-9);
    }

    #[test]
    fn hole_subtracts_area() {
        let outer = vec![
            Point::new(2.0, 45.0),
            Point::new(2.001, 45.0),
            Point::new(2.001, 45.001),
            Point::new(2.0, 45.001),
        ];
        let hole = vec![
            Point::new(2.0002, 45.0002),
            Point::new(2.0002, 45.0005),
            Point::new(2.0006, 45.0005),
            Point::new(2.0006, 45.0002),
        ];
        let with_hole = Polygon::new(outer.clone(), vec![hole.clone()]).unwrap();
        let full = Polygon::simple(outer).unwrap();
        // The hole's area must be measured in the same frame as the outer ring.
        let frame = full.frame();
        let hole_area = ring_moments(&frame, &hole).0.abs();
        let expected = full.area_m2() - hole_area;
        assert!((with_hole.area_m2() - expected).abs() / expected < 1e-9);
        assert!(!with_hole.contains_point(Point::new(2.0004, 45.0003)));
        assert!(with_hole.contains_point(Point::new(2.0002, 45.0003)));
    }

    #[test]
    fn degenerate_rings_rejected() {
        let two = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 0.0),
        ]);
        assert!(matches!(two, Err(GeometryError::Degenerate(_))));
        let flat = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
        ]);
        assert!(matches!(flat, Err(GeometryError::Degenerate(_))));
        let collinear = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0),
        ]);
        assert!(matches!(collinear, Err(GeometryError::Degenerate(_))));
    }

    #[test]
    fn bowtie_rejected() {
        let bowtie = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ]);
        assert_eq!(bowtie, Err(GeometryError::SelfIntersection { ring: 0 }));
    }

    #[test]
    fn out_of_range_coordinate_rejected() {
        let p = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(181.0, 0.0),
            Point::new(0.0, 1.0),
        ]);
        assert!(matches!(p, Err(GeometryError::InvalidCoordinate { .. })));
    }

    #[test]
    fn hole_outside_rejected() {
        let p = Polygon::new(
            vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            vec![vec![
                Point::new(2.0, 2.0),
                Point::new(3.0, 2.0),
                Point::new(3.0, 3.0),
            ]],
        );
        assert_eq!(p, Err(GeometryError::HoleOutside { hole: 0 }));
    }

    #[test]
    fn closing_vertex_is_stripped() {
        let p = Polygon::simple(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(p.exterior().len(), 3);
    }

    #[test]
    fn intersects_basic_cases() {
        let km = 1000.0 * deg_per_m();
        let a = square(3.0, 45.0, 0.0001);
        let b = square(3.0 + km, 45.0, 0.0001);
        assert!(!a.intersects(&b));
        let big = square(3.0, 45.0, 0.01);
        let inner = square(3.001, 45.001, 0.001);
        assert!(big.intersects(&inner));
        assert!(inner.intersects(&big));
        // Shared edge only.
        let right = square(3.0001, 45.0, 0.0001);
        assert!(a.intersects(&right));
    }

    #[test]
    fn boundary_points_are_inside() {
        let sq = square(0.0, 0.0, 1.0);
        assert!(sq.contains_point(Point::new(0.5, 0.0)));
        assert!(sq.contains_point(Point::new(1.0, 1.0)));
        assert!(sq.contains_point(sq.centroid()));
        assert!(!sq.contains_point(Point::new(2.5, 0.5)));
    }
}
