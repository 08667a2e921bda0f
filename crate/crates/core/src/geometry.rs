//! Points, clouds and oriented boxes in the LiDAR frame (x forward, y left,
//! z up, meters).
//!
//! Yaw is a clockwise rotation about +z. A box with yaw 0 has its length
//! along +y, its width along x and its height along z; its center is the
//! volumetric centroid.

use alloc::vec::Vec;
use core::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use crate::math::{self, cos, sin};

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("box size must be positive and finite, got h={h} w={w} l={l}")]
    InvalidSize { h: f64, w: f64, l: f64 },
    #[error("box center or yaw is not finite")]
    NonFinite,
    #[error("detection score {0} is outside [0, 1]")]
    InvalidScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(self) -> f64 {
        math::sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
    }

    pub fn bev_norm(self) -> f64 {
        math::sqrt(self.x * self.x + self.y * self.y)
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    /// Clockwise rotation about +z by `angle` radians.
    #[inline]
    pub fn rotate_z(self, angle: f64) -> Point3 {
        let (s, c) = (sin(angle), cos(angle));
        Point3::new(self.x * c + self.y * s, -self.x * s + self.y * c, self.z)
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// An ordered list of points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn translate(&self, offset: Point3) -> PointCloud {
        self.map(|p| p + offset)
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> PointCloud {
        PointCloud::new(self.points.iter().map(|&p| f(p)).collect())
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point3::ORIGIN, |acc, &p| acc + p);
        Some(sum * (1.0 / self.points.len() as f64))
    }

    /// Row-major `N x 3` coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.to_array()).collect()
    }
}

impl Index<usize> for PointCloud {
    type Output = Point3;
    fn index(&self, i: usize) -> &Point3 {
        &self.points[i]
    }
}

impl FromIterator<Point3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point3>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point3;
    type IntoIter = core::slice::Iter<'a, Point3>;
    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Clockwise rotation of every point about the z axis.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = (sin(angle), cos(angle));
    cloud.map(|p| Point3::new(p.x * c + p.y * s, -p.x * s + p.y * c, p.z))
}

/// Box dimensions in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Size3 {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl Size3 {
    pub const fn new(h: f64, w: f64, l: f64) -> Self {
        Size3 { h, w, l }
    }

    pub fn volume(self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.h, self.w, self.l]
    }

    fn is_valid(self) -> bool {
        self.h > 0.0 && self.w > 0.0 && self.l > 0.0 && self.h.is_finite() && self.w.is_finite() && self.l.is_finite()
    }
}

/// Oriented 3D box. Fields are public for reading; construct through
/// [`Box3D::new`] so the invariants hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: Size3,
    /// Radians in `[-pi, pi)`.
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: Size3, yaw: f64) -> Result<Self, GeometryError> {
        if !size.is_valid() {
            return Err(GeometryError::InvalidSize { h: size.h, w: size.w, l: size.l });
        }
        if !center.is_finite() || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Box3D { center, size, yaw: math::wrap_angle(yaw) })
    }

    pub fn volume(&self) -> f64 {
        self.size.volume()
    }

    /// Unit vector along the box length.
    pub fn heading(&self) -> Point3 {
        Point3::new(0.0, 1.0, 0.0).rotate_z(self.yaw)
    }

    pub fn z_range(&self) -> (f64, f64) {
        let half = 0.5 * self.size.h;
        (self.center.z - half, self.center.z + half)
    }

    /// Expresses a world point in the box frame (width along x, length along y).
    pub fn to_local(&self, p: Point3) -> Point3 {
        (p - self.center).rotate_z(-self.yaw)
    }

    pub fn contains(&self, p: Point3) -> bool {
        let q = self.to_local(p);
        q.x.abs() <= 0.5 * self.size.w && q.y.abs() <= 0.5 * self.size.l && q.z.abs() <= 0.5 * self.size.h
    }

    /// Footprint corners, counter-clockwise seen from above.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hw, hl) = (0.5 * self.size.w, 0.5 * self.size.l);
        let local = [[hw, -hl], [hw, hl], [-hw, hl], [-hw, -hl]];
        local.map(|[x, y]| {
            let p = Point3::new(x, y, 0.0).rotate_z(self.yaw);
            [p.x + self.center.x, p.y + self.center.y]
        })
    }

    pub fn translated(&self, offset: Point3) -> Box3D {
        Box3D { center: self.center + offset, ..*self }
    }
}

/// The eight vertices of the cuboid: bottom face first, then top face, each
/// in footprint order.
pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    let (z0, z1) = b.z_range();
    let bev = b.bev_corners();
    let mut out = [Point3::ORIGIN; 8];
    for (i, [x, y]) in bev.iter().copied().enumerate() {
        out[i] = Point3::new(x, y, z0);
        out[i + 4] = Point3::new(x, y, z1);
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    // Point on segment p->q where it crosses the infinite line a->b.
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland-Hodgman clipping of `subject` by the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = core::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the intersection of the two footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    polygon_area(&clip_convex(&pa, &pb))
}

/// Bird's-eye-view IoU of the footprints. Not used by the metrics.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    let area_a = a.size.w * a.size.l;
    let area_b = b.size.w * b.size.l;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU of two oriented boxes: exact footprint polygon
/// intersection times the overlap of the vertical extents.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    // Cheap reject on the circumscribed circles.
    let ra = 0.5 * math::sqrt(a.size.w * a.size.w + a.size.l * a.size.l);
    let rb = 0.5 * math::sqrt(b.size.w * b.size.w + b.size.l * b.size.l);
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A localizer output, optionally carrying a refined box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub location: Point3,
    pub score: f64,
    pub bbox: Option<Box3D>,
}

impl Detection {
    pub fn new(location: Point3, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        if !location.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Detection { location, score, bbox: None })
    }

    pub fn with_box(self, bbox: Box3D) -> Self {
        Detection { bbox: Some(bbox), ..self }
    }
}
