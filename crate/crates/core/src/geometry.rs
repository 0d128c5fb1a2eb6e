//! Planar geometry shared by the road network, the sampler and the simulator.
//!
//! All coordinates are meters in a right-handed frame; headings are radians
//! measured counter-clockwise from the +x axis.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

/// Boundary tolerance used by containment tests.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_heading(heading: f64) -> Self {
        Self::new(heading.cos(), heading.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn length(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).length()
    }

    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(self.x * c - self.y * s, self.x * s + self.y * c)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// Wrap an angle into `(-PI, PI]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// A position with a heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedPoint {
    pub position: Vec2,
    pub heading: f64,
}

impl OrientedPoint {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self { position, heading }
    }

    /// Offset perpendicular to the heading: left is `heading + 90°`.
    pub fn offset_lateral(&self, distance: f64, left: bool) -> OrientedPoint {
        let side = if left { PI / 2.0 } else { -PI / 2.0 };
        let dir = Vec2::from_heading(self.heading + side);
        OrientedPoint::new(self.position + dir * distance, self.heading)
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

fn orientation(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orientation(c, d, a);
    let d2 = orientation(c, d, b);
    let d3 = orientation(a, b, c);
    let d4 = orientation(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Vec2, q: Vec2, r: Vec2, o: f64| {
        o == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

pub fn segment_segment_distance(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// An open polyline with cumulative arc lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline; callers guarantee at least two points.
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least two points");
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += w[0].distance(w[1]);
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn first(&self) -> Vec2 {
        self.points[0]
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().unwrap()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    fn segment_heading(&self, idx: usize) -> f64 {
        (self.points[idx + 1] - self.points[idx]).heading()
    }

    pub fn start_heading(&self) -> f64 {
        self.segment_heading(0)
    }

    pub fn end_heading(&self) -> f64 {
        self.segment_heading(self.points.len() - 2)
    }

    /// Point and tangent heading at arc length `s` (clamped to the polyline).
    pub fn point_at(&self, s: f64) -> OrientedPoint {
        let s = s.clamp(0.0, self.length());
        let idx = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg_len = self.cumulative[idx + 1] - self.cumulative[idx];
        let t = if seg_len > 0.0 {
            (s - self.cumulative[idx]) / seg_len
        } else {
            0.0
        };
        let a = self.points[idx];
        let b = self.points[idx + 1];
        OrientedPoint::new(a + (b - a) * t, self.segment_heading(idx))
    }

    /// Oriented point at vertex `idx`; the heading is that of the adjacent segment.
    pub fn vertex(&self, idx: usize) -> OrientedPoint {
        let seg = idx.min(self.points.len() - 2);
        OrientedPoint::new(self.points[idx], self.segment_heading(seg))
    }

    /// Arc length of the orthogonal projection of `p` onto the polyline.
    pub fn project(&self, p: Vec2) -> f64 {
        self.project_within(p, 0.0, self.length())
    }

    /// Projection restricted to arc lengths in `[lo, hi]`.
    pub fn project_within(&self, p: Vec2, lo: f64, hi: f64) -> f64 {
        let mut best = (f64::INFINITY, lo);
        for (i, (a, b)) in self.segments().enumerate() {
            let (s0, s1) = (self.cumulative[i], self.cumulative[i + 1]);
            if s1 < lo || s0 > hi {
                continue;
            }
            let ab = b - a;
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 {
                ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let s = (s0 + t * (s1 - s0)).clamp(lo, hi);
            let d = p.distance(self.point_at(s).position);
            if d < best.0 {
                best = (d, s);
            }
        }
        best.1
    }

    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        self.segments()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn distance_to_polyline(&self, other: &Polyline) -> f64 {
        let mut best = f64::INFINITY;
        for (a, b) in self.segments() {
            for (c, d) in other.segments() {
                best = best.min(segment_segment_distance(a, b, c, d));
            }
        }
        best
    }

    /// Concatenates polylines, dropping duplicated joint vertices.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Polyline>) -> Polyline {
        let mut points: Vec<Vec2> = Vec::new();
        for part in parts {
            for &p in part.points() {
                if points.last().is_some_and(|q| q.distance(p) < 1e-9) {
                    continue;
                }
                points.push(p);
            }
        }
        Polyline::new(points)
    }

    /// Rectangles covering each segment, half-width on each side.
    pub fn buffered_quads(&self, half_width: f64) -> Vec<Polygon> {
        self.segments()
            .map(|(a, b)| {
                let n = Vec2::from_heading((b - a).heading() + PI / 2.0) * half_width;
                Polygon::new(vec![a - n, b - n, b + n, a + n])
            })
            .collect()
    }
}

/// A simple closed ring (the closing edge is implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub ring: Vec<Vec2>,
}

impl Polygon {
    pub fn new(ring: Vec<Vec2>) -> Self {
        Self { ring }
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.ring.len();
        (0..n).map(move |i| (self.ring[i], self.ring[(i + 1) % n]))
    }

    /// Even-odd crossing test; boundary points count as inside.
    pub fn contains(&self, p: Vec2) -> bool {
        if self.boundary_distance(p) <= BOUNDARY_EPS {
            return true;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn centroid(&self) -> Vec2 {
        let mut area = 0.0;
        let mut c = Vec2::new(0.0, 0.0);
        for (a, b) in self.edges() {
            let cr = a.cross(b);
            area += cr;
            c = c + (a + b) * cr;
        }
        if area.abs() < 1e-12 {
            let n = self.ring.len() as f64;
            let sum = self.ring.iter().fold(Vec2::new(0.0, 0.0), |acc, &p| acc + p);
            return sum * (1.0 / n);
        }
        c * (1.0 / (3.0 * area))
    }

    /// True if no two non-adjacent edges touch.
    pub fn is_simple(&self) -> bool {
        let edges: Vec<_> = self.edges().collect();
        let n = edges.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a, b) = edges[i];
                let (c, d) = edges[j];
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }
}

/// A union of polygons. A point is in the region if it is in any member polygon.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Region {
    pub polygons: Vec<Polygon>,
}

impl Region {
    pub fn new(polygons: Vec<Polygon>) -> Self {
        Self { polygons }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.polygons.iter().any(|poly| poly.contains(p))
    }

    /// Zero inside, otherwise the distance to the nearest boundary.
    pub fn distance(&self, p: Vec2) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.polygons
            .iter()
            .map(|poly| poly.boundary_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}
