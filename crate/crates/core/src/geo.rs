//! Zone-polygon overlay: population apportionment from census blocks,
//! centroid-to-border distances and spillover ring classification.
//!
//! All area and distance work happens in a zone-local Lambert cylindrical
//! equal-area projection measured in miles. Polygon intersection areas use
//! a signed triangle-fan decomposition: each ring is written as a signed sum
//! of triangles from a fixed origin, so the intersection area of two
//! arbitrary simple polygons (concave, with holes, multi-part) reduces to a
//! signed sum of convex triangle-triangle clips.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{fmt_f64, LonLat, Role, TractId, ZoneId};

/// Mean Earth radius in miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.7613;

/// Vertex-coordinate tolerance in projected units.
pub const VERTEX_TOLERANCE: f64 = 1e-9;

pub const INSIDE_SHARE: f64 = 0.75;
pub const BORDER_SHARE: f64 = 0.25;
pub const OUTSIDE_1MI: f64 = 1.0;
pub const OUTSIDE_2MI: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn distance(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Lambert cylindrical equal-area projection with its standard parallel at
/// the projection centre. Output units are miles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalProjection {
    lon0: f64,
    lat0: f64,
    cos_lat0: f64,
    sin_lat0: f64,
}

impl LocalProjection {
    pub fn new(center: LonLat) -> Self {
        let lat0 = center.lat.to_radians();
        LocalProjection {
            lon0: center.lon.to_radians(),
            lat0,
            cos_lat0: lat0.cos(),
            sin_lat0: lat0.sin(),
        }
    }

    pub fn center(&self) -> LonLat {
        LonLat::new(self.lon0.to_degrees(), self.lat0.to_degrees())
    }

    pub fn forward(&self, p: LonLat) -> Point {
        let lon = p.lon.to_radians();
        let lat = p.lat.to_radians();
        Point::new(
            EARTH_RADIUS_MILES * (lon - self.lon0) * self.cos_lat0,
            EARTH_RADIUS_MILES * (lat.sin() - self.sin_lat0) / self.cos_lat0,
        )
    }

    pub fn inverse(&self, p: Point) -> LonLat {
        let lon = self.lon0 + p.x / (EARTH_RADIUS_MILES * self.cos_lat0);
        let s = (p.y * self.cos_lat0 / EARTH_RADIUS_MILES + self.sin_lat0).clamp(-1.0, 1.0);
        LonLat::new(lon.to_degrees(), s.asin().to_degrees())
    }
}

/// Closed ring stored without the repeated closing vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct Ring {
    vertices: Vec<Point>,
}

impl Ring {
    pub fn new(mut vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() >= 2 {
            let (first, last) = (vertices[0], vertices[vertices.len() - 1]);
            if first.distance(last) <= VERTEX_TOLERANCE {
                vertices.pop();
            }
        }
        vertices.dedup_by(|a, b| a.distance(*b) <= VERTEX_TOLERANCE);
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "ring needs at least 3 distinct vertices, got {}",
                vertices.len()
            )));
        }
        let ring = Ring { vertices };
        if let Some((i, j)) = ring.first_self_intersection() {
            return Err(Error::Geometry(format!(
                "ring is self-intersecting (edges {i} and {j})"
            )));
        }
        Ok(ring)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    fn oriented(mut self, ccw: bool) -> Self {
        if (self.signed_area() > 0.0) != ccw {
            self.vertices.reverse();
        }
        self
    }

    fn first_self_intersection(&self) -> Option<(usize, usize)> {
        let n = self.vertices.len();
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Winding number of the ring around `p`.
    fn winding(&self, p: Point) -> i32 {
        let mut w = 0;
        for (a, b) in self.edges() {
            let side = b.sub(a).cross(p.sub(a));
            if a.y <= p.y {
                if b.y > p.y && side > 0.0 {
                    w += 1;
                }
            } else if b.y <= p.y && side < 0.0 {
                w -= 1;
            }
        }
        w
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - VERTEX_TOLERANCE
        && p.x <= a.x.max(b.x) + VERTEX_TOLERANCE
        && p.y >= a.y.min(b.y) - VERTEX_TOLERANCE
        && p.y <= a.y.max(b.y) + VERTEX_TOLERANCE
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    let tol = VERTEX_TOLERANCE * VERTEX_TOLERANCE;
    if ((d1 > tol && d2 < -tol) || (d1 < -tol && d2 > tol)) && ((d3 > tol && d4 < -tol) || (d3 < -tol && d4 > tol)) {
        return true;
    }
    (d1.abs() <= tol && on_segment(q1, q2, p1))
        || (d2.abs() <= tol && on_segment(q1, q2, p2))
        || (d3.abs() <= tol && on_segment(p1, p2, q1))
        || (d4.abs() <= tol && on_segment(p1, p2, q2))
}

/// Planar region: one or more disjoint parts, each an outer ring with
/// optional holes. Outer rings are stored counter-clockwise and holes
/// clockwise, so the sum of ring winding numbers is the region indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    rings: Vec<Ring>,
}

impl Region {
    pub fn polygon(outer: Vec<Point>) -> Result<Self> {
        Ok(Region {
            rings: vec![Ring::new(outer)?.oriented(true)],
        })
    }

    /// `parts` is a list of polygons, each given as outer ring followed by holes.
    pub fn from_parts(parts: Vec<Vec<Vec<Point>>>) -> Result<Self> {
        let mut rings = Vec::new();
        for part in parts {
            for (k, ring) in part.into_iter().enumerate() {
                rings.push(Ring::new(ring)?.oriented(k == 0));
            }
        }
        if rings.is_empty() {
            return Err(Error::Geometry("region has no rings".into()));
        }
        Ok(Region { rings })
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Region::polygon(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn rings(&self) -> &[Ring] {
        &self.rings
    }

    pub fn area(&self) -> f64 {
        self.rings.iter().map(Ring::signed_area).sum()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.rings.iter().map(|r| r.winding(p)).sum::<i32>() != 0
    }

    pub fn centroid(&self) -> Point {
        let (mut cx, mut cy, mut a) = (0.0, 0.0, 0.0);
        for ring in &self.rings {
            for (p, q) in ring.edges() {
                let c = p.cross(q);
                cx += (p.x + q.x) * c;
                cy += (p.y + q.y) * c;
                a += c;
            }
        }
        if a.abs() <= f64::EPSILON {
            let n: usize = self.rings.iter().map(|r| r.vertices.len()).sum();
            let (sx, sy) = self
                .rings
                .iter()
                .flat_map(|r| r.vertices.iter())
                .fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
            return Point::new(sx / n as f64, sy / n as f64);
        }
        Point::new(cx / (3.0 * a), cy / (3.0 * a))
    }

    fn bbox(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.rings.iter().flat_map(|r| r.vertices.iter()) {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Area of `self ∩ other`.
    pub fn intersection_area(&self, other: &Region) -> f64 {
        let (alo, ahi) = self.bbox();
        let (blo, bhi) = other.bbox();
        if alo.x > bhi.x || blo.x > ahi.x || alo.y > bhi.y || blo.y > ahi.y {
            return 0.0;
        }
        let origin_a = self.rings[0].vertices[0];
        let origin_b = other.rings[0].vertices[0];
        let fan_a = signed_fan(&self.rings, origin_a);
        let fan_b = signed_fan(&other.rings, origin_b);
        let mut total = 0.0;
        for (sa, ta) in &fan_a {
            for (sb, tb) in &fan_b {
                total += sa * sb * triangle_intersection_area(ta, tb);
            }
        }
        total.max(0.0)
    }

    /// Distance from `p` to the nearest point on any ring edge.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.rings
            .iter()
            .flat_map(|r| r.edges())
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Signed triangles (sign, CCW vertices) whose signed indicator sum equals
/// the region indicator almost everywhere.
fn signed_fan(rings: &[Ring], origin: Point) -> Vec<(f64, [Point; 3])> {
    let mut out = Vec::new();
    for ring in rings {
        for (a, b) in ring.edges() {
            let area2 = orient(origin, a, b);
            if area2.abs() <= VERTEX_TOLERANCE * VERTEX_TOLERANCE {
                continue;
            }
            if area2 > 0.0 {
                out.push((1.0, [origin, a, b]));
            } else {
                out.push((-1.0, [origin, b, a]));
            }
        }
    }
    out
}

/// Area of the intersection of two counter-clockwise triangles via
/// Sutherland–Hodgman clipping.
fn triangle_intersection_area(subject: &[Point; 3], clip: &[Point; 3]) -> f64 {
    let mut poly: Vec<Point> = subject.to_vec();
    let mut next = Vec::with_capacity(8);
    for k in 0..3 {
        let (a, b) = (clip[k], clip[(k + 1) % 3]);
        let inside = |p: Point| orient(a, b, p) >= 0.0;
        next.clear();
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let (cin, pin) = (inside(cur), inside(prev));
            if cin {
                if !pin {
                    next.push(line_intersection(prev, cur, a, b));
                }
                next.push(cur);
            } else if pin {
                next.push(line_intersection(prev, cur, a, b));
            }
        }
        std::mem::swap(&mut poly, &mut next);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    let n = poly.len();
    0.5 * (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum::<f64>()
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let dp = orient(a, b, p);
    let dq = orient(a, b, q);
    let t = dp / (dp - dq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
    let t = t.clamp(0.0, 1.0);
    p.distance(Point::new(a.x + t * ab.x, a.y + t * ab.y))
}

/// Zone polygon in geographic coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ZonePolygon {
    pub zone_id: ZoneId,
    pub role: Role,
    pub adoption_year: Option<i32>,
    /// Parts → rings → (lon, lat) vertices.
    pub parts: Vec<Vec<Vec<LonLat>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub block_id: String,
    pub tract_id: TractId,
    pub population: f64,
    pub parts: Vec<Vec<Vec<LonLat>>>,
}

fn project_parts(parts: &[Vec<Vec<LonLat>>], proj: &LocalProjection) -> Result<Region> {
    Region::from_parts(
        parts
            .iter()
            .map(|rings| {
                rings
                    .iter()
                    .map(|ring| ring.iter().map(|&p| proj.forward(p)).collect())
                    .collect()
            })
            .collect(),
    )
}

fn parts_center(parts: &[Vec<Vec<LonLat>>]) -> LonLat {
    let pts: Vec<&LonLat> = parts.iter().flat_map(|p| p.iter().flat_map(|r| r.iter())).collect();
    let n = pts.len().max(1) as f64;
    LonLat::new(
        pts.iter().map(|p| p.lon).sum::<f64>() / n,
        pts.iter().map(|p| p.lat).sum::<f64>() / n,
    )
}

impl ZonePolygon {
    pub fn projection(&self) -> LocalProjection {
        LocalProjection::new(parts_center(&self.parts))
    }

    pub fn project(&self, proj: &LocalProjection) -> Result<Region> {
        project_parts(&self.parts, proj).map_err(|e| Error::Geometry(format!("zone {}: {e}", self.zone_id)))
    }
}

impl BlockRecord {
    pub fn project(&self, proj: &LocalProjection) -> Result<Region> {
        project_parts(&self.parts, proj).map_err(|e| Error::Geometry(format!("block {}: {e}", self.block_id)))
    }
}

/// A block already projected into the zone's planar frame.
#[derive(Clone, Debug)]
pub struct PlanarBlock {
    pub block_id: String,
    pub tract_id: TractId,
    pub population: f64,
    pub geometry: Region,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Apportionment {
    pub pop_in_zone: BTreeMap<TractId, f64>,
    /// Tract area covered by the zone (sum of block overlaps).
    pub overlap_area: BTreeMap<TractId, f64>,
    /// Total block area per tract.
    pub tract_area: BTreeMap<TractId, f64>,
    pub tract_population: BTreeMap<TractId, f64>,
    /// Zero-area blocks; they contribute nothing.
    pub degenerate_blocks: Vec<String>,
}

impl Apportionment {
    pub fn overlap_share(&self, tract: &TractId) -> f64 {
        let area = self.tract_area.get(tract).copied().unwrap_or(0.0);
        if area <= 0.0 {
            return 0.0;
        }
        (self.overlap_area.get(tract).copied().unwrap_or(0.0) / area).clamp(0.0, 1.0)
    }
}

/// Each block contributes `area(block ∩ zone) / area(block) × population` to
/// its tract.
pub fn apportion_population(blocks: &[PlanarBlock], zone: &Region) -> Apportionment {
    let mut out = Apportionment::default();
    for block in blocks {
        *out.tract_population.entry(block.tract_id.clone()).or_default() += block.population;
        let area = block.geometry.area();
        *out.tract_area.entry(block.tract_id.clone()).or_default() += area.max(0.0);
        out.pop_in_zone.entry(block.tract_id.clone()).or_default();
        out.overlap_area.entry(block.tract_id.clone()).or_default();
        if area <= VERTEX_TOLERANCE {
            log::warn!("block {} has zero area; it contributes no population", block.block_id);
            out.degenerate_blocks.push(block.block_id.clone());
            continue;
        }
        let mut overlap = block.geometry.intersection_area(zone).min(area);
        // Clipping round-off must not leak population from contained blocks.
        if overlap >= area * (1.0 - 1e-12) {
            overlap = area;
        }
        *out.overlap_area.get_mut(&block.tract_id).unwrap() += overlap;
        *out.pop_in_zone.get_mut(&block.tract_id).unwrap() += overlap / area * block.population;
    }
    out
}

pub fn border_distance(point: Point, zone: &Region) -> f64 {
    zone.boundary_distance(point)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingClass {
    Inside,
    Border,
    #[serde(rename = "outside_1mi")]
    Outside1Mi,
    #[serde(rename = "outside_2mi")]
    Outside2Mi,
    Beyond,
}

impl RingClass {
    pub const ALL: [RingClass; 5] = [
        RingClass::Inside,
        RingClass::Border,
        RingClass::Outside1Mi,
        RingClass::Outside2Mi,
        RingClass::Beyond,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RingClass::Inside => "inside",
            RingClass::Border => "border",
            RingClass::Outside1Mi => "outside_1mi",
            RingClass::Outside2Mi => "outside_2mi",
            RingClass::Beyond => "beyond",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        RingClass::ALL.into_iter().find(|r| r.as_str() == s.trim())
    }
}

impl fmt::Display for RingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lower share bounds are inclusive: 0.75 is `inside`, 0.25 is `border`.
pub fn classify_ring(area_overlap_share: f64, centroid_border_distance: f64) -> RingClass {
    if area_overlap_share >= INSIDE_SHARE {
        RingClass::Inside
    } else if area_overlap_share >= BORDER_SHARE {
        RingClass::Border
    } else if centroid_border_distance <= OUTSIDE_1MI {
        RingClass::Outside1Mi
    } else if centroid_border_distance <= OUTSIDE_2MI {
        RingClass::Outside2Mi
    } else {
        RingClass::Beyond
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneAssignment {
    pub tract_id: TractId,
    pub zone_id: ZoneId,
    pub zone_role: Role,
    pub adoption_year: Option<i32>,
    pub area_overlap_share: f64,
    pub pop_in_zone: f64,
    pub tract_population: f64,
    pub ring: RingClass,
    /// Centroid-to-border distance in miles (unsigned).
    pub centroid_border_distance: f64,
    pub centroid_inside: bool,
}

#[derive(Clone, Debug)]
pub struct OverlayOptions {
    /// Assignments farther than this (and with no overlap) are not emitted.
    pub max_distance_miles: f64,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        OverlayOptions {
            max_distance_miles: 10.0,
        }
    }
}

/// Overlays every zone on the blocks and emits one assignment per
/// (tract, zone) pair within range. A tract touching several zones gets
/// several assignments; resolving them is left to the caller.
///
/// Tract centroids default to the area-weighted centroid of the tract's
/// blocks unless supplied.
pub fn compute_assignments(
    zones: &[ZonePolygon],
    blocks: &[BlockRecord],
    centroids: Option<&BTreeMap<TractId, LonLat>>,
    opts: &OverlayOptions,
) -> Result<(Vec<ZoneAssignment>, Vec<String>)> {
    let mut assignments = Vec::new();
    let mut degenerate = Vec::new();
    for zone in zones {
        let proj = zone.projection();
        let zone_region = zone.project(&proj)?;
        let (zlo, zhi) = zone_region.bbox();
        let reach = opts.max_distance_miles + 5.0;
        let mut planar = Vec::new();
        for block in blocks {
            let region = block.project(&proj)?;
            let (lo, hi) = region.bbox();
            if lo.x > zhi.x + reach || hi.x < zlo.x - reach || lo.y > zhi.y + reach || hi.y < zlo.y - reach {
                continue;
            }
            planar.push(PlanarBlock {
                block_id: block.block_id.clone(),
                tract_id: block.tract_id.clone(),
                population: block.population,
                geometry: region,
            });
        }
        let app = apportion_population(&planar, &zone_region);
        degenerate.extend(app.degenerate_blocks.iter().cloned());

        let mut weighted: BTreeMap<TractId, (f64, f64, f64)> = BTreeMap::new();
        for b in &planar {
            let a = b.geometry.area();
            let c = b.geometry.centroid();
            let e = weighted.entry(b.tract_id.clone()).or_default();
            e.0 += a * c.x;
            e.1 += a * c.y;
            e.2 += a;
        }

        for (tract, &pop_in_zone) in &app.pop_in_zone {
            let centroid = match centroids.and_then(|m| m.get(tract)) {
                Some(&ll) => proj.forward(ll),
                None => {
                    let (sx, sy, a) = weighted[tract];
                    if a <= 0.0 {
                        continue;
                    }
                    Point::new(sx / a, sy / a)
                }
            };
            let share = app.overlap_share(tract);
            let distance = border_distance(centroid, &zone_region);
            if share <= 0.0 && distance > opts.max_distance_miles {
                continue;
            }
            assignments.push(ZoneAssignment {
                tract_id: tract.clone(),
                zone_id: zone.zone_id.clone(),
                zone_role: zone.role,
                adoption_year: zone.adoption_year,
                area_overlap_share: share,
                pop_in_zone,
                tract_population: app.tract_population[tract],
                ring: classify_ring(share, distance),
                centroid_border_distance: distance,
                centroid_inside: zone_region.contains(centroid),
            });
        }
    }
    Ok((assignments, degenerate))
}

const ASSIGNMENT_HEADER: [&str; 10] = [
    "tract_id",
    "zone_id",
    "zone_role",
    "adoption_year",
    "area_overlap_share",
    "pop_in_zone",
    "tract_population",
    "ring",
    "centroid_border_distance_mi",
    "centroid_inside",
];

pub fn write_assignments(path: &Path, rows: &[ZoneAssignment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ASSIGNMENT_HEADER)?;
    for a in rows {
        w.write_record([
            a.tract_id.0.clone(),
            a.zone_id.0.clone(),
            a.zone_role.as_str().to_string(),
            a.adoption_year.map(|y| y.to_string()).unwrap_or_default(),
            fmt_f64(a.area_overlap_share),
            fmt_f64(a.pop_in_zone),
            fmt_f64(a.tract_population),
            a.ring.as_str().to_string(),
            fmt_f64(a.centroid_border_distance),
            a.centroid_inside.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_assignments(path: &Path) -> Result<Vec<ZoneAssignment>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("assignments: missing column `{name}`")))
    };
    let idx: Vec<usize> = ASSIGNMENT_HEADER.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let num = |k: usize| {
            get(k).parse::<f64>().map_err(|_| Error::Row {
                row,
                column: ASSIGNMENT_HEADER[k].into(),
                message: format!("cannot parse `{}`", get(k)),
            })
        };
        let bad = |k: usize| Error::Row {
            row,
            column: ASSIGNMENT_HEADER[k].into(),
            message: format!("invalid value `{}`", get(k)),
        };
        out.push(ZoneAssignment {
            tract_id: TractId::new(get(0)),
            zone_id: ZoneId::new(get(1)),
            zone_role: Role::parse(get(2)).ok_or_else(|| bad(2))?,
            adoption_year: match get(3) {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(3))?),
            },
            area_overlap_share: num(4)?,
            pop_in_zone: num(5)?,
            tract_population: num(6)?,
            ring: RingClass::parse(get(7)).ok_or_else(|| bad(7))?,
            centroid_border_distance: num(8)?,
            centroid_inside: get(9).parse().map_err(|_| bad(9))?,
        });
    }
    Ok(out)
}

// GeoJSON input ------------------------------------------------------------

fn parse_ring(v: &serde_json::Value) -> Result<Vec<LonLat>> {
    v.as_array()
        .ok_or_else(|| Error::Geometry("ring is not an array".into()))?
        .iter()
        .map(|pt| {
            let c = pt
                .as_array()
                .filter(|c| c.len() >= 2)
                .ok_or_else(|| Error::Geometry("position must have two coordinates".into()))?;
            match (c[0].as_f64(), c[1].as_f64()) {
                (Some(lon), Some(lat)) => Ok(LonLat::new(lon, lat)),
                _ => Err(Error::Geometry("non-numeric coordinate".into())),
            }
        })
        .collect()
}

fn parse_geometry(g: &serde_json::Value) -> Result<Vec<Vec<Vec<LonLat>>>> {
    let kind = g["type"].as_str().unwrap_or("");
    let coords = &g["coordinates"];
    let polygon = |p: &serde_json::Value| -> Result<Vec<Vec<LonLat>>> {
        p.as_array()
            .ok_or_else(|| Error::Geometry("polygon is not an array of rings".into()))?
            .iter()
            .map(parse_ring)
            .collect()
    };
    match kind {
        "Polygon" => Ok(vec![polygon(coords)?]),
        "MultiPolygon" => coords
            .as_array()
            .ok_or_else(|| Error::Geometry("multipolygon is not an array".into()))?
            .iter()
            .map(polygon)
            .collect(),
        other => Err(Error::Geometry(format!("unsupported geometry type `{other}`"))),
    }
}

fn features(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    match doc["type"].as_str() {
        Some("FeatureCollection") => Ok(doc["features"].as_array().cloned().unwrap_or_default()),
        Some("Feature") => Ok(vec![doc]),
        _ => Err(Error::Schema(format!(
            "{}: expected a GeoJSON FeatureCollection",
            path.display()
        ))),
    }
}

fn prop_str(f: &serde_json::Value, key: &str) -> Option<String> {
    match &f["properties"][key] {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Zone features need `zone_id` and `role` properties; `adoption_year` is
/// optional.
pub fn read_zones_geojson(path: &Path) -> Result<Vec<ZonePolygon>> {
    features(path)?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let zone_id =
                prop_str(f, "zone_id").ok_or_else(|| Error::Schema(format!("zone feature {i}: missing `zone_id`")))?;
            let role_raw = prop_str(f, "role").unwrap_or_default();
            let role = Role::parse(&role_raw)
                .filter(|r| *r != Role::Neither)
                .ok_or_else(|| Error::Schema(format!("zone {zone_id}: role must be designee or finalist")))?;
            let adoption_year = f["properties"]["adoption_year"].as_i64().map(|y| y as i32);
            Ok(ZonePolygon {
                zone_id: ZoneId::new(zone_id),
                role,
                adoption_year,
                parts: parse_geometry(&f["geometry"])?,
            })
        })
        .collect()
}

/// Block features need `block_id`, `tract_id` and `population` properties.
pub fn read_blocks_geojson(path: &Path) -> Result<Vec<BlockRecord>> {
    features(path)?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let block_id = prop_str(f, "block_id")
                .ok_or_else(|| Error::Schema(format!("block feature {i}: missing `block_id`")))?;
            let tract_id = prop_str(f, "tract_id")
                .ok_or_else(|| Error::Schema(format!("block {block_id}: missing `tract_id`")))?;
            let population = f["properties"]["population"]
                .as_f64()
                .filter(|p| *p >= 0.0)
                .ok_or_else(|| Error::Schema(format!("block {block_id}: population must be >= 0")))?;
            Ok(BlockRecord {
                block_id,
                tract_id: TractId::new(tract_id),
                population,
                parts: parse_geometry(&f["geometry"])?,
            })
        })
        .collect()
}

fn geometry_json(parts: &[Vec<Vec<LonLat>>]) -> serde_json::Value {
    let polys: Vec<serde_json::Value> = parts
        .iter()
        .map(|rings| {
            serde_json::Value::Array(
                rings
                    .iter()
                    .map(|ring| {
                        let mut pts: Vec<serde_json::Value> =
                            ring.iter().map(|p| serde_json::json!([p.lon, p.lat])).collect();
                        if let Some(first) = pts.first().cloned() {
                            pts.push(first);
                        }
                        serde_json::Value::Array(pts)
                    })
                    .collect(),
            )
        })
        .collect();
    if polys.len() == 1 {
        serde_json::json!({"type": "Polygon", "coordinates": polys[0]})
    } else {
        serde_json::json!({"type": "MultiPolygon", "coordinates": polys})
    }
}

pub fn zones_to_geojson(zones: &[ZonePolygon]) -> serde_json::Value {
    let features: Vec<_> = zones
        .iter()
        .map(|z| {
            serde_json::json!({
                "type": "Feature",
                "properties": {
                    "zone_id": z.zone_id.0,
                    "role": z.role.as_str(),
                    "adoption_year": z.adoption_year,
                },
                "geometry": geometry_json(&z.parts),
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}

pub fn blocks_to_geojson(blocks: &[BlockRecord]) -> serde_json::Value {
    let features: Vec<_> = blocks
        .iter()
        .map(|b| {
            serde_json::json!({
                "type": "Feature",
                "properties": {
                    "block_id": b.block_id,
                    "tract_id": b.tract_id.0,
                    "population": b.population,
                },
                "geometry": geometry_json(&b.parts),
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Region {
        Region::rectangle(x, y, x + s, y + s).unwrap()
    }

    fn block(id: &str, tract: &str, pop: f64, geometry: Region) -> PlanarBlock {
        PlanarBlock {
            block_id: id.into(),
            tract_id: TractId::new(tract),
            population: pop,
            geometry,
        }
    }

    /// Overlap of two axis-aligned rectangles, computed directly.
    fn rect_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
        let w = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
        let h = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
        w * h
    }

    #[test]
    fn block_fully_inside_contributes_all() {
        let zone = square(-1.0, -1.0, 5.0);
        let app = apportion_population(&[block("b", "t", 100.0, square(0.0, 0.0, 1.0))], &zone);
        assert!((app.pop_in_zone[&TractId::new("t")] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn half_inside_block_contributes_half() {
        let zone = Region::rectangle(0.5, -1.0, 3.0, 3.0).unwrap();
        let app = apportion_population(&[block("b", "t", 100.0, square(0.0, 0.0, 1.0))], &zone);
        assert!((app.pop_in_zone[&TractId::new("t")] - 50.0).abs() < 1e-12);
        assert!((app.overlap_share(&TractId::new("t")) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn four_unit_blocks_against_offset_rectangle() {
        // Tract A = blocks (0,0),(1,0); tract B = blocks (0,1),(1,1).
        let cells = [
            (0.0, 0.0, "A", 40.0),
            (1.0, 0.0, "A", 60.0),
            (0.0, 1.0, "B", 80.0),
            (1.0, 1.0, "B", 20.0),
        ];
        let zone_rect = (0.3, 0.6, 1.7, 2.5);
        let zone = Region::rectangle(zone_rect.0, zone_rect.1, zone_rect.2, zone_rect.3).unwrap();
        let blocks: Vec<_> = cells
            .iter()
            .enumerate()
            .map(|(i, &(x, y, t, p))| block(&format!("b{i}"), t, p, square(x, y, 1.0)))
            .collect();
        let app = apportion_population(&blocks, &zone);
        let mut expected: BTreeMap<&str, f64> = BTreeMap::new();
        for &(x, y, t, p) in &cells {
            *expected.entry(t).or_default() += rect_overlap((x, y, x + 1.0, y + 1.0), zone_rect) * p;
        }
        for (t, e) in expected {
            let got = app.pop_in_zone[&TractId::new(t)];
            assert!((got - e).abs() < 1e-9, "{t}: {got} vs {e}");
        }
    }

    #[test]
    fn concave_zone_and_holes() {
        // L-shaped zone: 2x2 square minus the top-right unit cell.
        let l = Region::polygon(vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 2.0),
            Point::new(0.0, 2.0),
        ])
        .unwrap();
        assert!((l.area() - 3.0).abs() < 1e-12);
        let probe = square(0.5, 0.5, 1.0);
        // The probe covers 3 quarter-cells of the L.
        assert!((l.intersection_area(&probe) - 0.75).abs() < 1e-12);
        assert!((probe.intersection_area(&l) - 0.75).abs() < 1e-12);

        let donut = Region::from_parts(vec![vec![
            vec![
                Point::new(0.0, 0.0),
                Point::new(4.0, 0.0),
                Point::new(4.0, 4.0),
                Point::new(0.0, 4.0),
            ],
            vec![
                Point::new(1.0, 1.0),
                Point::new(3.0, 1.0),
                Point::new(3.0, 3.0),
                Point::new(1.0, 3.0),
            ],
        ]])
        .unwrap();
        assert!((donut.area() - 12.0).abs() < 1e-12);
        assert!((donut.intersection_area(&square(0.0, 0.0, 2.0)) - 3.0).abs() < 1e-12);
        assert!(!donut.contains(Point::new(2.0, 2.0)));
        assert!(donut.contains(Point::new(0.5, 2.0)));
    }

    #[test]
    fn population_is_conserved_under_full_containment() {
        let zone = square(-10.0, -10.0, 30.0);
        let blocks: Vec<_> = (0..12)
            .map(|i| {
                let x = (i % 4) as f64 * 1.3;
                let y = (i / 4) as f64 * 0.9;
                block(
                    &format!("b{i}"),
                    &format!("t{}", i % 3),
                    10.0 + i as f64 * 7.0,
                    Region::rectangle(x, y, x + 1.3, y + 0.9).unwrap(),
                )
            })
            .collect();
        let app = apportion_population(&blocks, &zone);
        let total: f64 = blocks.iter().map(|b| b.population).sum();
        assert_eq!(app.pop_in_zone.values().sum::<f64>(), total);
    }

    #[test]
    fn degenerate_block_contributes_zero() {
        let flat = Region {
            rings: vec![Ring {
                vertices: vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)],
            }],
        };
        let app = apportion_population(&[block("flat", "t", 100.0, flat)], &square(-1.0, -1.0, 3.0));
        assert_eq!(app.pop_in_zone[&TractId::new("t")], 0.0);
        assert_eq!(app.degenerate_blocks, vec!["flat".to_string()]);
    }

    #[test]
    fn self_intersecting_ring_is_rejected() {
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ];
        assert!(Region::polygon(bowtie).is_err());
        assert!(Region::polygon(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn ring_thresholds() {
        assert_eq!(classify_ring(0.80, 0.0), RingClass::Inside);
        assert_eq!(classify_ring(0.75, 0.0), RingClass::Inside);
        assert_eq!(classify_ring(0.7499, 0.0), RingClass::Border);
        assert_eq!(classify_ring(0.25, 3.0), RingClass::Border);
        assert_eq!(classify_ring(0.2499, 0.2), RingClass::Outside1Mi);
        assert_eq!(classify_ring(0.10, 0.6), RingClass::Outside1Mi);
        assert_eq!(classify_ring(0.0, 1.0), RingClass::Outside1Mi);
        assert_eq!(classify_ring(0.0, 1.5), RingClass::Outside2Mi);
        assert_eq!(classify_ring(0.0, 2.0), RingClass::Outside2Mi);
        assert_eq!(classify_ring(0.0, 2.01), RingClass::Beyond);
    }

    #[test]
    fn ring_classification_is_monotone_in_share() {
        let rank = |r: RingClass| RingClass::ALL.iter().position(|x| *x == r).unwrap();
        for d in [0.0, 0.5, 1.5, 3.0] {
            let mut prev = rank(classify_ring(0.0, d));
            for k in 1..=100 {
                let cur = rank(classify_ring(k as f64 / 100.0, d));
                assert!(cur <= prev);
                prev = cur;
            }
        }
    }

    #[test]
    fn border_distance_cases() {
        let unit = square(0.0, 0.0, 1.0);
        assert_eq!(border_distance(Point::new(1.0, 1.0), &unit), 0.0);
        assert!((border_distance(Point::new(2.0, 0.5), &unit) - 1.0).abs() < 1e-15);
        assert!((border_distance(Point::new(0.5, 0.5), &unit) - 0.5).abs() < 1e-15);
        assert!((border_distance(Point::new(2.0, 2.0), &unit) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn projection_round_trips_and_preserves_area() {
        let proj = LocalProjection::new(LonLat::new(-118.25, 34.05));
        let p = LonLat::new(-118.1, 34.2);
        let back = proj.inverse(proj.forward(p));
        assert!((back.lon - p.lon).abs() < 1e-10 && (back.lat - p.lat).abs() < 1e-10);

        // A 0.1° × 0.1° cell: exact spherical area is R²·Δλ·(sin φ1 − sin φ0).
        let (lon0, lat0, d) = (-118.3f64, 34.0f64, 0.1f64);
        let ring: Vec<Point> = [(lon0, lat0), (lon0 + d, lat0), (lon0 + d, lat0 + d), (lon0, lat0 + d)]
            .iter()
            .map(|&(x, y)| proj.forward(LonLat::new(x, y)))
            .collect();
        let area = Region::polygon(ring).unwrap().area();
        let exact =
            EARTH_RADIUS_MILES.powi(2) * d.to_radians() * ((lat0 + d).to_radians().sin() - lat0.to_radians().sin());
        assert!((area - exact).abs() / exact < 1e-9);
    }
}
