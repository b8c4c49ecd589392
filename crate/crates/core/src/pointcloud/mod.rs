//! Point-cloud values, rigid poses and the two on-disk cloud formats.
//!
//! Frame convention used throughout the crate: +x forward (vehicle heading),
//! +y left, +z up. Sensor-frame clouds have their origin at the LiDAR
//! center; the perception pipeline first maps them into the ground-level
//! vehicle frame with a [`Pose`].

mod io;

pub use io::{load_pointcloud, read_binary, read_csv, save_pointcloud, write_binary, write_csv, CloudFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub w_x: f64,
    pub w_y: f64,
    pub w_z: f64,
    pub intensity: f64,
}

impl Point {
    pub const fn new(w_x: f64, w_y: f64, w_z: f64, intensity: f64) -> Self {
        Self { w_x, w_y, w_z, intensity }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_x.is_finite() && self.w_y.is_finite() && self.w_z.is_finite()) {
            return Err(Error::Validation(format!("non-finite coordinate in {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Validation(format!("intensity {} outside [0, 1]", self.intensity)));
        }
        Ok(())
    }

    /// Euclidean distance from the frame origin.
    pub fn range(&self) -> f64 {
        (self.w_x * self.w_x + self.w_y * self.w_y + self.w_z * self.w_z).sqrt()
    }

    /// Bird's-eye distance from the frame origin.
    pub fn planar_range(&self) -> f64 {
        self.w_x.hypot(self.w_y)
    }

    /// Azimuth in radians, counter-clockwise from +x.
    pub fn azimuth(&self) -> f64 {
        self.w_y.atan2(self.w_x)
    }

    /// Elevation angle in radians above the xy-plane.
    pub fn elevation(&self) -> f64 {
        self.w_z.atan2(self.planar_range())
    }

    /// Builds a point from sensor-centric spherical coordinates (radians).
    pub fn from_spherical(range: f64, azimuth: f64, elevation: f64, intensity: f64) -> Self {
        let planar = range * elevation.cos();
        Self::new(planar * azimuth.cos(), planar * azimuth.sin(), range * elevation.sin(), intensity)
    }

    /// Rotates the point about the z-axis through the origin.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.w_x - s * self.w_y, s * self.w_x + c * self.w_y, self.w_z, self.intensity)
    }
}

/// An ordered sequence of points (an n×4 matrix).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            p.validate().map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("point {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(Self { points })
    }

    /// Skips validation; callers guarantee finite coordinates and intensities in [0, 1].
    pub(crate) fn from_trusted(points: Vec<Point>) -> Self {
        debug_assert!(points.iter().all(|p| p.validate().is_ok()));
        Self { points }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Concatenation `self + extra`, order preserved.
    pub fn append(&self, extra: &PointCloud) -> PointCloud {
        let mut points = Vec::with_capacity(self.len() + extra.len());
        points.extend_from_slice(&self.points);
        points.extend_from_slice(&extra.points);
        PointCloud { points }
    }

    /// Applies `p' = R·p + t` to every point.
    pub fn transform(&self, pose: &Pose) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| pose.apply(p)).collect() }
    }

    /// Maps every point through `f`, re-validating the result.
    pub fn map_points(&self, f: impl FnMut(&Point) -> Point) -> Result<PointCloud> {
        PointCloud::new(self.points.iter().map(f).collect())
    }

    pub(crate) fn filter(&self, mut keep: impl FnMut(&Point) -> bool) -> PointCloud {
        PointCloud { points: self.points.iter().copied().filter(|p| keep(p)).collect() }
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Free-function form of [`PointCloud::transform`] that validates the pose first.
pub fn transform_pose(cloud: &PointCloud, pose: &Pose) -> Result<PointCloud> {
    pose.validate()?;
    Ok(cloud.transform(pose))
}

/// Free-function form of [`PointCloud::append`].
pub fn append(cloud: &PointCloud, extra: &PointCloud) -> PointCloud {
    cloud.append(extra)
}

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform between frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub const fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub const fn from_translation(translation: [f64; 3]) -> Self {
        let mut p = Self::identity();
        p.translation = translation;
        p
    }

    /// Rotation about z by `yaw` radians followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    /// Checks RᵀR = I within 1e-9 and a proper (det > 0) rotation.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().flatten().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite entries".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Validation(format!("rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})")));
                }
            }
        }
        if det3(r) <= 0.0 {
            return Err(Error::Validation("rotation matrix has negative determinant".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point) -> Point {
        let r = &self.rotation;
        let t = &self.translation;
        let v = [p.w_x, p.w_y, p.w_z];
        let row = |i: usize| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2] + t[i];
        Point::new(row(0), row(1), row(2), p.intensity)
    }

    /// The inverse transform `p = Rᵀ(p' − t)`.
    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = &self.translation;
        let mut ti = [0.0; 3];
        for (i, v) in ti.iter_mut().enumerate() {
            *v = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Pose { rotation: rt, translation: ti }
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud_of(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| Point::new(i as f64, 0.5 * i as f64, 1.0, 0.25)).collect()).unwrap()
    }

    #[test]
    fn identity_pose_leaves_cloud_unchanged() {
        let c = cloud_of(5);
        assert_eq!(transform_pose(&c, &Pose::identity()).unwrap(), c);
    }

    #[test]
    fn pure_translation() {
        let c = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.3)]).unwrap();
        let out = transform_pose(&c, &Pose::from_translation([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.points()[0], Point::new(1.0, 0.0, 0.0, 0.3));
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let bad = Pose { rotation: [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };
        assert!(matches!(transform_pose(&cloud_of(1), &bad), Err(Error::Validation(_))));
        let mirror = Pose { rotation: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };
        assert!(mirror.validate().is_err());
    }

    #[test]
    fn rejects_bad_points() {
        assert!(PointCloud::new(vec![Point::new(f64::NAN, 0.0, 0.0, 0.5)]).is_err());
        assert!(PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 1.5)]).is_err());
    }

    #[test]
    fn append_cardinality_and_identity() {
        let x = cloud_of(5);
        let t = cloud_of(3);
        assert_eq!(x.append(&PointCloud::empty()), x);
        assert_eq!(PointCloud::empty().append(&t), t);
        assert_eq!(append(&x, &t).len(), 8);
    }

    fn random_pose(yaw: f64, pitch: f64, roll: f64, t: [f64; 3]) -> Pose {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let rotation = [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ];
        Pose::new(rotation, t).unwrap()
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64, 0.0..=1.0f64).prop_map(|(x, y, z, i)| Point::new(x, y, z, i))
    }

    proptest! {
        #[test]
        fn pose_then_inverse_recovers_cloud(
            pts in prop::collection::vec(arb_point(), 1..40),
            yaw in -3.1..3.1f64, pitch in -1.5..1.5f64, roll in -3.1..3.1f64,
            tx in -20.0..20.0f64, ty in -20.0..20.0f64, tz in -3.0..3.0f64,
        ) {
            let cloud = PointCloud::new(pts).unwrap();
            let pose = random_pose(yaw, pitch, roll, [tx, ty, tz]);
            let back = cloud.transform(&pose).transform(&pose.inverse());
            for (a, b) in cloud.iter().zip(back.iter()) {
                prop_assert!((a.w_x - b.w_x).abs() < 1e-9);
                prop_assert!((a.w_y - b.w_y).abs() < 1e-9);
                prop_assert!((a.w_z - b.w_z).abs() < 1e-9);
                prop_assert_eq!(a.intensity, b.intensity);
            }
        }

        #[test]
        fn pose_preserves_pairwise_distances(
            pts in prop::collection::vec(arb_point(), 2..20),
            yaw in -3.1..3.1f64, pitch in -1.5..1.5f64, roll in -3.1..3.1f64,
        ) {
            let cloud = PointCloud::new(pts).unwrap();
            let moved = cloud.transform(&random_pose(yaw, pitch, roll, [3.0, -2.0, 1.0]));
            let d = |a: &Point, b: &Point| ((a.w_x - b.w_x).powi(2) + (a.w_y - b.w_y).powi(2) + (a.w_z - b.w_z).powi(2)).sqrt();
            for i in 0..cloud.len() {
                for j in i + 1..cloud.len() {
                    let before = d(&cloud.points()[i], &cloud.points()[j]);
                    let after = d(&moved.points()[i], &moved.points()[j]);
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn append_is_associative(
            a in prop::collection::vec(arb_point(), 0..10),
            b in prop::collection::vec(arb_point(), 0..10),
            c in prop::collection::vec(arb_point(), 0..10),
        ) {
            let (a, b, c) = (PointCloud::new(a).unwrap(), PointCloud::new(b).unwrap(), PointCloud::new(c).unwrap());
            prop_assert_eq!(a.append(&b).append(&c), a.append(&b.append(&c)));
        }
    }
}
