//! Point clouds, planar poses and cloud preprocessing.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math::{atan2, cos, floor, sin, wrap_angle};

/// A LiDAR return in the sensor frame (x right, y forward, z up), meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// An ordered set of points with optional per-point intensity in `[0, 1]`.
///
/// Construction rejects non-finite coordinates, so every cloud that exists
/// is finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            points,
            intensity: None,
        })
    }

    /// Intensities are clamped to `[0, 1]`; NaN intensities become 0.
    pub fn with_intensity(points: Vec<Point3>, intensity: Vec<f32>) -> Result<Self> {
        if intensity.len() != points.len() {
            return Err(invalid("intensity count differs from point count"));
        }
        let mut cloud = Self::new(points)?;
        cloud.intensity = Some(
            intensity
                .into_iter()
                .map(|i| if i.is_nan() { 0.0 } else { i.clamp(0.0, 1.0) })
                .collect(),
        );
        Ok(cloud)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep` returns true.
    pub fn retain(&self, mut keep: impl FnMut(&Point3) -> bool) -> Self {
        let mut points = Vec::new();
        let mut intensity = self.intensity.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(p) {
                points.push(*p);
                if let (Some(out), Some(src)) = (intensity.as_mut(), self.intensity.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        Self { points, intensity }
    }
}

/// A planar rigid transform. `yaw` is always kept in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2Pose {
    pub x: f64,
    pub y: f64,
    yaw: f64,
}

impl Default for Se2Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se2Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    pub fn is_identity(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.yaw == 0.0
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se2Pose) -> Se2Pose {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        Se2Pose::new(
            c * other.x - s * other.y + self.x,
            s * other.x + c * other.y + self.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Se2Pose {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        Se2Pose::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// Homogeneous 3x3 matrix, row-major.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        [[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]]
    }

    /// Reads translation and yaw from a homogeneous matrix; the rotation
    /// block is assumed orthonormal.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Se2Pose {
        Se2Pose::new(m[0][2], m[1][2], atan2(m[1][0], m[0][0]))
    }

    /// Planar translation distance to `other`, meters.
    pub fn translation_distance(&self, other: &Se2Pose) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }

    /// Absolute wrapped yaw difference to `other`, radians.
    pub fn yaw_distance(&self, other: &Se2Pose) -> f64 {
        libm::fabs(wrap_angle(self.yaw - other.yaw))
    }
}

/// Composes a stored map pose with a map-to-query relative transform,
/// giving the global pose of the query.
pub fn compose_global(map_pose: &Se2Pose, relative: &Se2Pose) -> Se2Pose {
    map_pose.compose(relative)
}

/// Voxel-grid downsampling: one centroid per occupied cubic cell of side
/// `leaf`. Output is ordered by cell index and does not depend on the input
/// point order.
pub fn voxel_filter(cloud: &PointCloud, leaf: f64) -> Result<PointCloud> {
    if !(leaf > 0.0 && leaf.is_finite()) {
        return Err(invalid("voxel leaf size must be positive"));
    }
    let cell = |v: f64| floor(v / leaf) as i64;
    let pts = cloud.points();
    let mut order: Vec<(i64, i64, i64, usize)> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (cell(p.x), cell(p.y), cell(p.z), i))
        .collect();
    // Within a cell, sort by coordinate bits so the summation order is fixed.
    order.sort_unstable_by(|a, b| {
        (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)).then_with(|| {
            let (pa, pb) = (&pts[a.3], &pts[b.3]);
            pa.x.total_cmp(&pb.x)
                .then(pa.y.total_cmp(&pb.y))
                .then(pa.z.total_cmp(&pb.z))
        })
    });

    let intensity = cloud.intensity();
    let mut out = Vec::new();
    let mut out_i = intensity.map(|_| Vec::new());
    let mut start = 0;
    while start < order.len() {
        let key = (order[start].0, order[start].1, order[start].2);
        let mut end = start;
        let (mut sx, mut sy, mut sz, mut si) = (0.0, 0.0, 0.0, 0.0f64);
        while end < order.len() && (order[end].0, order[end].1, order[end].2) == key {
            let idx = order[end].3;
            let p = pts[idx];
            sx += p.x;
            sy += p.y;
            sz += p.z;
            if let Some(int) = intensity {
                si += int[idx] as f64;
            }
            end += 1;
        }
        let n = (end - start) as f64;
        out.push(Point3::new(sx / n, sy / n, sz / n));
        if let Some(v) = out_i.as_mut() {
            v.push((si / n) as f32);
        }
        start = end;
    }
    Ok(PointCloud {
        points: out,
        intensity: out_i,
    })
}

/// Keeps points with `|x| <= d` and `|y| <= d`; z is not constrained here.
pub fn crop_cloud(cloud: &PointCloud, half_extent: f64) -> Result<PointCloud> {
    if !(half_extent > 0.0 && half_extent.is_finite()) {
        return Err(invalid("crop half extent must be positive"));
    }
    Ok(cloud.retain(|p| libm::fabs(p.x) <= half_extent && libm::fabs(p.y) <= half_extent))
}

/// Keeps points with `z_min <= z <= z_max`.
pub fn crop_height(cloud: &PointCloud, z_min: f64, z_max: f64) -> Result<PointCloud> {
    if !(z_min < z_max) {
        return Err(invalid("z_min must be below z_max"));
    }
    Ok(cloud.retain(|p| p.z >= z_min && p.z <= z_max))
}

/// Rotates each point's (x, y) by the pose yaw, then translates. z is kept.
pub fn transform_cloud(cloud: &PointCloud, pose: &Se2Pose) -> PointCloud {
    if pose.is_identity() {
        return cloud.clone();
    }
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let (x, y) = pose.apply(p.x, p.y);
            Point3::new(x, y, p.z)
        })
        .collect();
    PointCloud {
        points,
        intensity: cloud.intensity.clone(),
    }
}
