//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's geometry beyond constructing
//! polygons.

#![allow(dead_code)]

use pvdta::geometry::{LocalFrame, Point, Polygon, EARTH_RADIUS_M};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_vector(p: Point) -> [f64; 3] {
    let (lon, lat) = (p.lon.to_radians(), p.lat.to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Signed spherical excess of one triangle (Van Oosterom–Strackee), with the
/// triple product evaluated on edge differences for small triangles.
fn triangle_excess(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let num = dot(a, cross(sub(b, a), sub(c, a)));
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

/// Area of a ring on the sphere of radius [`EARTH_RADIUS_M`] by fan
/// triangulation from the first vertex.
pub fn spherical_ring_area(ring: &[Point]) -> f64 {
    let v: Vec<[f64; 3]> = ring.iter().map(|&p| unit_vector(p)).collect();
    let excess: f64 = (1..v.len() - 1)
        .map(|i| triangle_excess(v[0], v[i], v[i + 1]))
        .sum();
    excess.abs() * EARTH_RADIUS_M * EARTH_RADIUS_M
}

pub fn spherical_area(p: &Polygon) -> f64 {
    spherical_ring_area(p.exterior())
        - p.holes()
            .iter()
            .map(|h| spherical_ring_area(h))
            .sum::<f64>()
}

/// Winding number of `pt` around a ring, in raw lon/lat.
pub fn winding_number(pt: Point, ring: &[Point]) -> i32 {
    let mut wn = 0;
    for i in 0..ring.len() {
        let (a, b) = (ring[i], ring[(i + 1) % ring.len()]);
        let side = (b.lon - a.lon) * (pt.lat - a.lat) - (pt.lon - a.lon) * (b.lat - a.lat);
        if a.lat <= pt.lat {
            if b.lat > pt.lat && side > 0.0 {
                wn += 1;
            }
        } else if b.lat <= pt.lat && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// Interior test for points known not to lie on any edge.
pub fn winding_contains(p: &Polygon, pt: Point) -> bool {
    winding_number(pt, p.exterior()) != 0 && p.holes().iter().all(|h| winding_number(pt, h) == 0)
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

pub fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (d1, d2, d3, d4) = (
        orient(c, d, a),
        orient(c, d, b),
        orient(a, b, c),
        orient(a, b, d),
    );
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

fn edges(p: &Polygon) -> Vec<(Point, Point)> {
    std::iter::once(p.exterior())
        .chain(p.holes().iter().map(Vec::as_slice))
        .flat_map(|r| (0..r.len()).map(move |i| (r[i], r[(i + 1) % r.len()])))
        .collect()
}

/// Brute force: any pair of edges touches, or one polygon holds a vertex of
/// the other.
pub fn brute_intersects(a: &Polygon, b: &Polygon) -> bool {
    let (ea, eb) = (edges(a), edges(b));
    if ea
        .iter()
        .any(|&(p, q)| eb.iter().any(|&(r, s)| segments_touch(p, q, r, s)))
    {
        return true;
    }
    winding_contains(b, a.exterior()[0]) || winding_contains(a, b.exterior()[0])
}

/// Random star-shaped polygon (simple, usually non-convex) in a local metric
/// frame around `center`, with radii in `[r_min, r_max]` metres.
pub fn random_star(
    rng: &mut impl Rng,
    center: Point,
    r_min: f64,
    r_max: f64,
    max_vertices: usize,
) -> Polygon {
    let n = rng.random_range(3..=max_vertices);
    star_with(rng, center, r_min, r_max, n)
}

fn star_with(rng: &mut impl Rng, center: Point, r_min: f64, r_max: f64, n: usize) -> Polygon {
    let angles = sorted_angles(rng, n);
    let frame = LocalFrame::new(center);
    let ring: Vec<(f64, f64)> = angles
        .iter()
        .map(|&t| {
            let r = rng.random_range(r_min..=r_max);
            (r * t.cos(), r * t.sin())
        })
        .collect();
    Polygon::from_local(&frame, &ring).expect("star polygons are simple")
}

/// Random convex polygon inscribed in a circle of radius `r` metres.
pub fn random_convex(rng: &mut impl Rng, center: Point, r: f64, max_vertices: usize) -> Polygon {
    let n = rng.random_range(3..=max_vertices);
    let angles = sorted_angles(rng, n);
    let ring: Vec<(f64, f64)> = angles.iter().map(|&t| (r * t.cos(), r * t.sin())).collect();
    Polygon::from_local(&LocalFrame::new(center), &ring).expect("inscribed polygons are simple")
}

/// `n` angles spread around the circle with a minimum gap, so consecutive
/// vertices never coincide and the polygon is not degenerate.
fn sorted_angles(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let step = std::f64::consts::TAU / n as f64;
    let offset = rng.random_range(0.0..step);
    (0..n)
        .map(|i| offset + step * (i as f64 + rng.random_range(0.1..0.9)))
        .collect()
}

/// Star polygon with a star-shaped hole well inside its inscribed circle.
/// With at least 8 vertices and angular gaps below 81°, every outer edge
/// stays farther than `0.76 * r_min` from the centre.
pub fn random_star_with_hole(rng: &mut impl Rng, center: Point, r_min: f64, r_max: f64) -> Polygon {
    let n = rng.random_range(8..=12);
    let outer = star_with(rng, center, r_min, r_max, n);
    let inner = random_star(rng, center, 0.1 * r_min, 0.5 * r_min, 6);
    let mut hole = inner.exterior().to_vec();
    hole.reverse();
    Polygon::new(outer.exterior().to_vec(), vec![hole]).expect("hole inside the inner radius")
}

pub fn random_point_near(rng: &mut impl Rng, center: Point, radius_m: f64) -> Point {
    let frame = LocalFrame::new(center);
    frame.to_lonlat(
        rng.random_range(-radius_m..radius_m),
        rng.random_range(-radius_m..radius_m),
    )
}

/// Type-7 (linear interpolation) quantile, written independently.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let (i, frac) = (pos as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// Exact-ish sum via sorting by magnitude and Kahan compensation.
pub fn careful_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in v {
        let y = x - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}
