//! Camera model, rigid transforms, forward and inverse pinhole projection,
//! sparse depth densification and ground-plane fitting.
//!
//! Frame conventions: the world frame is right-handed with z up; the robot
//! base frame has x forward, y left, z up; the camera frame has x right,
//! y down and z forward along the optical axis. Lens distortion and skew
//! are not modelled.
//!
//! Transforms are named `a_to_b`: they map coordinates expressed in frame
//! `a` into frame `b`. A pose (body in world) is therefore `base_to_world`.

use nalgebra::{Isometry3, Matrix3, Point3, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type WorldPoint = Point3<f64>;

/// A rigid-body transform stored as a unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    iso: Isometry3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            iso: Isometry3::identity(),
        }
    }

    /// Builds a transform from a (possibly unnormalised) quaternion
    /// `(w, x, y, z)` and a translation. The quaternion is normalised.
    pub fn from_quaternion(q: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidTransform(format!("quaternion {q:?} cannot be normalised")));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidTransform("translation must be finite".into()));
        }
        Ok(Self {
            iso: Isometry3::from_parts(
                Translation3::new(translation[0], translation[1], translation[2]),
                UnitQuaternion::from_quaternion(quat),
            ),
        })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            iso: Isometry3::from_parts(translation.into(), rotation),
        }
    }

    /// Builds a transform from a row-major homogeneous 4×4 matrix. The
    /// rotation block must be orthonormal within 1e-6.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("matrix entries must be finite".into()));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom.iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(Error::InvalidTransform(format!("last row must be 0 0 0 1, got {bottom:?}")));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho_err > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::InvalidTransform(format!(
                "rotation block is not a proper rotation (orthogonality error {ortho_err:e})"
            )));
        }
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Ok(Self::from_parts(rot, Vector3::new(m[3], m[7], m[11])))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let h = self.iso.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = h[(r, c)];
            }
        }
        out
    }

    /// `(w, x, y, z)`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.iso.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.iso.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self {
            iso: self.iso * other.iso,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        Self {
            iso: self.iso.inverse(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.iso.transform_point(p)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.iso.rotation * v
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Pinhole intrinsics without skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Perspective division of `K · p`. Scaling `p` by any positive factor
    /// leaves the result unchanged.
    pub fn project_camera(&self, p: &Vector3<f64>) -> PixelPoint {
        PixelPoint {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
        }
    }

    /// `K⁻¹ [u, v, 1]ᵀ`: the viewing ray with unit camera-frame depth.
    pub fn unproject(&self, px: &PixelPoint) -> Vector3<f64> {
        Vector3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: &PixelPoint) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Continuous pixel coordinates. Pixel `(x, y)` covers `[x, x+1) × [y, y+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Centre of integer pixel `(x, y)`.
    pub fn center_of(x: usize, y: usize) -> Self {
        Self {
            u: x as f64 + 0.5,
            v: y as f64 + 0.5,
        }
    }

    pub fn pixel_index(&self) -> Option<(usize, usize)> {
        if self.u < 0.0 || self.v < 0.0 || !self.u.is_finite() || !self.v.is_finite() {
            return None;
        }
        Some((self.u.floor() as usize, self.v.floor() as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: PixelPoint,
    /// Camera-frame z coordinate in meters.
    pub depth: f64,
    pub in_frame: bool,
}

/// Camera intrinsics together with the static base-to-camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub base_to_cam: RigidTransform,
}

/// A posed camera: everything needed to map world points to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub world_to_cam: RigidTransform,
    pub cam_to_world: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl CameraView {
    pub fn new(base_to_world: &RigidTransform, calib: &Calibration) -> Self {
        let world_to_cam = calib.base_to_cam.compose(&base_to_world.inverse());
        Self {
            world_to_cam,
            cam_to_world: world_to_cam.inverse(),
            intrinsics: calib.intrinsics,
        }
    }

    pub fn to_camera(&self, p: &WorldPoint) -> Vector3<f64> {
        self.world_to_cam.apply(p).coords
    }

    pub fn project(&self, p: &WorldPoint) -> Result<Projection> {
        project_camera_point(&self.to_camera(p), &self.intrinsics)
    }

    pub fn backproject(&self, px: &PixelPoint, depth: f64) -> Result<WorldPoint> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth { depth });
        }
        Ok(self.cam_to_world.apply(&Point3::from(self.intrinsics.unproject(px) * depth)))
    }

    /// Camera centre in world coordinates.
    pub fn origin(&self) -> WorldPoint {
        self.cam_to_world.apply(&Point3::origin())
    }

    /// World-frame direction of the pixel ray, scaled so that its
    /// camera-frame depth component is 1.
    pub fn ray_direction(&self, px: &PixelPoint) -> Vector3<f64> {
        self.cam_to_world.apply_vector(&self.intrinsics.unproject(px))
    }
}

fn project_camera_point(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Projection> {
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let pixel = k.project_camera(pc);
    Ok(Projection {
        pixel,
        depth: pc.z,
        in_frame: k.contains(&pixel),
    })
}

/// Forward projection `u = K · T_base→cam · T_world→base · p`.
///
/// Points outside the image are returned with `in_frame == false`; points at
/// or behind the camera plane are an error.
pub fn project_world_to_pixel(
    p: &WorldPoint,
    world_to_base: &RigidTransform,
    base_to_cam: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<Projection> {
    let pc = base_to_cam.apply(&world_to_base.apply(p));
    project_camera_point(&pc.coords, k)
}

/// Inverse projection `x = T_base→world · T_cam→base · d · K⁻¹ u`, where `d`
/// is the camera-frame depth.
pub fn backproject_pixel_to_world(
    px: &PixelPoint,
    depth: f64,
    base_to_world: &RigidTransform,
    cam_to_base: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<WorldPoint> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::NonPositiveDepth { depth });
    }
    let pc = Point3::from(k.unproject(px) * depth);
    Ok(base_to_world.apply(&cam_to_base.apply(&pc)))
}

/// Per-pixel camera-frame depth in meters; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.values[y * self.width + x];
        (d > 0.0).then_some(d)
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        self.values[y * self.width + x] = if depth > 0.0 && depth.is_finite() { depth } else { 0.0 };
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Fills every invalid pixel with the depth of the nearest valid sample
/// within `radius_px` (Euclidean pixel distance). Equidistant samples are
/// resolved in favour of the one that comes first in row-major order.
pub fn densify_depth(sparse: &DepthImage, radius_px: usize) -> Result<DepthImage> {
    if sparse.valid_count() == 0 {
        return Err(Error::EmptyDepthImage);
    }
    let (w, h) = sparse.size();
    let r = radius_px as isize;
    let r2 = r * r;
    let mut out = sparse.clone();
    for y in 0..h {
        for x in 0..w {
            if sparse.values[y * w + x] > 0.0 {
                continue;
            }
            let mut best: Option<(isize, f64)> = None;
            // Row-major window scan visits samples in scan order, so a strict
            // comparison keeps the first of several equidistant samples.
            for dy in -r..=r {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dist2 = dx * dx + dy * dy;
                    if dist2 > r2 {
                        continue;
                    }
                    let d = sparse.values[sy as usize * w + sx as usize];
                    if d > 0.0 && best.is_none_or(|(b, _)| dist2 < b) {
                        best = Some((dist2, d));
                    }
                }
            }
            if let Some((_, d)) = best {
                out.values[y * w + x] = d;
            }
        }
    }
    Ok(out)
}

/// Plane `normal · p = offset` with the normal in the +z hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inliers: usize,
}

impl GroundPlane {
    pub fn horizontal(z: f64) -> Self {
        Self {
            normal: Vector3::z(),
            offset: z,
            inliers: 0,
        }
    }

    /// Signed distance along the normal; positive above the plane.
    pub fn signed_distance(&self, p: &WorldPoint) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }

    /// Plane elevation at `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        (self.offset - self.normal.x * x - self.normal.y * y) / self.normal.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    /// Set from the pipeline seed; not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Reject candidate planes whose normal is tilted more than this many
    /// degrees away from +z. `None` accepts any orientation.
    pub max_tilt_deg: Option<f64>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            inlier_threshold: 0.05,
            seed: 0,
            max_tilt_deg: Some(30.0),
        }
    }
}

/// Seeded RANSAC plane fit followed by a least-squares refinement on the
/// consensus set.
pub fn fit_ground_plane(points: &[WorldPoint], cfg: &RansacConfig) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::DegenerateCloud(format!("need at least 3 points, got {}", points.len())));
    }
    if !(cfg.inlier_threshold > 0.0) {
        return Err(Error::InvalidArgument("inlier threshold must be positive".into()));
    }
    let min_nz = cfg.max_tilt_deg.map(|deg| deg.to_radians().cos());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = points.len();
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;

    for _ in 0..cfg.iterations.max(1) {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for taken in [a.min(b), a.max(b)] {
            if c >= taken {
                c += 1;
            }
        }
        let Some((normal, offset)) = plane_through(&points[a], &points[b], &points[c]) else {
            continue;
        };
        if min_nz.is_some_and(|m| normal.z < m) {
            continue;
        }
        let count = points
            .iter()
            .filter(|p| (normal.dot(&p.coords) - offset).abs() <= cfg.inlier_threshold)
            .count();
        if best.is_none_or(|(c0, _, _)| count > c0) {
            best = Some((count, normal, offset));
        }
    }

    let (_, normal, offset) = best.ok_or_else(|| {
        Error::DegenerateCloud("no non-collinear sample satisfied the plane constraints".into())
    })?;
    let inliers: Vec<&WorldPoint> = points
        .iter()
        .filter(|p| (normal.dot(&p.coords) - offset).abs() <= cfg.inlier_threshold)
        .collect();
    let (normal, offset) = least_squares_plane(&inliers).unwrap_or((normal, offset));
    let count = points
        .iter()
        .filter(|p| (normal.dot(&p.coords) - offset).abs() <= cfg.inlier_threshold)
        .count();
    Ok(GroundPlane {
        normal,
        offset,
        inliers: count,
    })
}

fn plane_through(a: &WorldPoint, b: &WorldPoint, c: &WorldPoint) -> Option<(Vector3<f64>, f64)> {
    let ab = b - a;
    let ac = c - a;
    let cross = ab.cross(&ac);
    let norm = cross.norm();
    if !(norm > 1e-12 * ab.norm() * ac.norm()) || norm == 0.0 {
        return None;
    }
    let mut normal = cross / norm;
    if normal.z < 0.0 {
        normal = -normal;
    }
    Some((normal, normal.dot(&a.coords)))
}

/// Total least squares plane through the points: the normal is the
/// eigenvector of the scatter matrix with the smallest eigenvalue.
pub(crate) fn least_squares_plane(points: &[&WorldPoint]) -> Option<(Vector3<f64>, f64)> {
    if points.len() < 3 {
        return None;
    }
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let mut normal: Vector3<f64> = eig.eigenvectors.column(min_idx).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    normal /= norm;
    if normal.z < 0.0 {
        normal = -normal;
    }
    Some((normal, normal.dot(&centroid)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let k = CameraIntrinsics::new(120.0, 110.0, 63.5, 47.25, 128, 96).unwrap();
        let id = RigidTransform::identity();
        let pr = project_world_to_pixel(&Point3::new(0.0, 0.0, 5.0), &id, &id, &k).unwrap();
        assert_eq!((pr.pixel.u, pr.pixel.v, pr.depth), (63.5, 47.25, 5.0));
        assert!(pr.in_frame);
    }

    #[test]
    fn hand_computed_pinhole_example() {
        // u = 100 * (1 / 2) + 50 = 100, which is one past the last column.
        let id = RigidTransform::identity();
        let pr = project_world_to_pixel(&Point3::new(1.0, 0.0, 2.0), &id, &id, &k100()).unwrap();
        assert_eq!(pr.pixel.u, 100.0);
        assert_eq!(pr.pixel.v, 50.0);
        assert!(!pr.in_frame);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let id = RigidTransform::identity();
        let err = project_world_to_pixel(&Point3::new(0.0, 0.0, -1.0), &id, &id, &k100()).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { .. }));
        assert!(project_world_to_pixel(&Point3::new(1.0, 1.0, 0.0), &id, &id, &k100()).is_err());
    }

    #[test]
    fn backproject_principal_point_lies_on_axis() {
        let id = RigidTransform::identity();
        let k = k100();
        let p = backproject_pixel_to_world(&PixelPoint::new(50.0, 50.0), 3.0, &id, &id, &k).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 3.0));
        let err = backproject_pixel_to_world(&PixelPoint::new(1.0, 1.0), 0.0, &id, &id, &k).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDepth { .. }));
    }

    #[test]
    fn unit_intrinsics_apply_extrinsics_only() {
        // K = I is not a valid image camera (cx must lie inside the frame), so
        // build it directly.
        let k = CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 10,
            height: 10,
        };
        let b2w = RigidTransform::from_quaternion([0.9, 0.1, -0.3, 0.2], [1.0, 2.0, 3.0]).unwrap();
        let c2b = RigidTransform::from_quaternion([0.5, 0.5, 0.5, 0.5], [0.0, 0.1, 1.2]).unwrap();
        let p = backproject_pixel_to_world(&PixelPoint::new(0.3, -0.7), 1.0, &b2w, &c2b, &k).unwrap();
        let expected = b2w.apply(&c2b.apply(&Point3::new(0.3, -0.7, 1.0)));
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn row_major_matrix_round_trip() {
        let t = RigidTransform::from_quaternion([0.7, -0.2, 0.4, 0.1], [0.5, -1.0, 2.0]).unwrap();
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        let a = t.to_row_major();
        let b = back.to_row_major();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut bad = a;
        bad[0] *= 2.0;
        assert!(RigidTransform::from_row_major(&bad).is_err());
    }

    #[test]
    fn intrinsics_invariants_are_checked() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn densify_single_sample_fills_image() {
        let mut d = DepthImage::invalid(7, 5);
        d.set(3, 2, 4.5);
        let out = densify_depth(&d, 10).unwrap();
        assert!(out.values.iter().all(|&v| v == 4.5));
    }

    #[test]
    fn densify_keeps_valid_pixels_and_respects_radius() {
        let mut d = DepthImage::invalid(20, 1);
        d.set(0, 0, 1.0);
        d.set(19, 0, 9.0);
        let out = densify_depth(&d, 3).unwrap();
        assert_eq!(out.get(0, 0), Some(1.0));
        assert_eq!(out.get(19, 0), Some(9.0));
        assert_eq!(out.get(3, 0), Some(1.0));
        assert_eq!(out.get(4, 0), None);
        assert!(matches!(densify_depth(&DepthImage::invalid(2, 2), 3), Err(Error::EmptyDepthImage)));
    }

    /// Brute-force nearest valid sample over the whole image.
    fn nearest_oracle(img: &DepthImage, x: usize, y: usize, radius: usize) -> Option<f64> {
        let mut best: Option<(usize, f64)> = None;
        for sy in 0..img.height {
            for sx in 0..img.width {
                if let Some(d) = img.get(sx, sy) {
                    let dx = sx.abs_diff(x);
                    let dy = sy.abs_diff(y);
                    let d2 = dx * dx + dy * dy;
                    if d2 <= radius * radius && best.is_none_or(|(b, _)| d2 < b) {
                        best = Some((d2, d));
                    }
                }
            }
        }
        best.map(|(_, d)| d)
    }

    #[test]
    fn densify_two_corners_takes_nearer_sample() {
        let mut d = DepthImage::invalid(9, 9);
        d.set(0, 0, 2.0);
        d.set(8, 8, 10.0);
        let out = densify_depth(&d, 20).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(out.get(x, y), nearest_oracle(&d, x, y, 20), "pixel ({x}, {y})");
            }
        }
        // Anti-diagonal pixels are equidistant; the first sample in scan order wins.
        assert_eq!(out.get(4, 4), Some(2.0));
        assert_eq!(out.get(2, 1), Some(2.0));
        assert_eq!(out.get(7, 6), Some(10.0));
    }

    #[test]
    fn plane_fit_on_flat_cloud() {
        let pts: Vec<_> = (0..50)
            .map(|i| Point3::new((i % 7) as f64 * 0.3, (i / 7) as f64 * 0.4, 0.0))
            .collect();
        let plane = fit_ground_plane(&pts, &RansacConfig::default()).unwrap();
        assert!((plane.normal - Vector3::z()).norm() < 1e-9);
        assert!(plane.offset.abs() < 1e-9);
        assert_eq!(plane.inliers, 50);
    }

    #[test]
    fn plane_fit_through_three_points_is_exact() {
        let pts = [Point3::new(0.0, 0.0, 1.0), Point3::new(2.0, 0.0, 1.2), Point3::new(0.0, 3.0, 0.7)];
        let cfg = RansacConfig {
            max_tilt_deg: None,
            ..Default::default()
        };
        let plane = fit_ground_plane(&pts, &cfg).unwrap();
        for p in &pts {
            assert!(plane.signed_distance(p).abs() < 1e-12);
        }
        assert!((plane.normal.norm() - 1.0).abs() < 1e-9);
        assert!(plane.normal.z > 0.0);
    }

    #[test]
    fn plane_fit_rejects_degenerate_clouds() {
        let line: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_ground_plane(&line, &RansacConfig::default()), Err(Error::DegenerateCloud(_))));
        assert!(fit_ground_plane(&line[..2], &RansacConfig::default()).is_err());
    }

    #[test]
    fn plane_fit_ignores_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..900 {
            let p = Point3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-0.01..0.01));
            pts.push(p);
            truth.push(p);
        }
        for _ in 0..100 {
            pts.push(Point3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 5.0));
        }
        let cfg = RansacConfig {
            seed: 3,
            ..Default::default()
        };
        let plane = fit_ground_plane(&pts, &cfg).unwrap();
        let refs: Vec<&WorldPoint> = truth.iter().collect();
        let (n_ref, d_ref) = least_squares_plane(&refs).unwrap();
        assert!((plane.normal - n_ref).norm() < 1e-9);
        assert!((plane.offset - d_ref).abs() < 1e-9);
        assert!(plane.offset.abs() < cfg.inlier_threshold);
        assert_eq!(plane.inliers, 900);
        // Seed determinism, bit for bit.
        assert_eq!(fit_ground_plane(&pts, &cfg).unwrap(), plane);
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(-20.0f64..20.0),
        )
            .prop_filter_map("non-degenerate quaternion", |(q, t)| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 0.1).then(|| RigidTransform::from_quaternion(q, t).unwrap())
            })
    }

    fn transforms_close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        a.to_row_major().iter().zip(b.to_row_major()).all(|(x, y)| (x - y).abs() < tol)
    }

    proptest! {
        #[test]
        fn quaternion_is_normalised(t in arb_transform()) {
            let q = t.quaternion();
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn transform_group_laws(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            prop_assert!(transforms_close(&a.compose(&a.inverse()), &RigidTransform::identity(), 1e-9));
            prop_assert!(transforms_close(&a.inverse().inverse(), &a, 1e-9));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(transforms_close(&left, &right, 1e-9));
        }

        #[test]
        fn projection_ignores_homogeneous_scale(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.1f64..50.0, s in 0.01f64..100.0) {
            let k = k100();
            let p = Vector3::new(x, y, z);
            let a = k.project_camera(&p);
            let b = k.project_camera(&(p * s));
            prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }

        #[test]
        fn project_backproject_round_trip(
            u in 0.0f64..100.0, v in 0.0f64..100.0, d in 0.1f64..100.0,
            b2w in arb_transform(), b2c in arb_transform(),
        ) {
            let k = k100();
            let px = PixelPoint::new(u, v);
            let x = backproject_pixel_to_world(&px, d, &b2w, &b2c.inverse(), &k).unwrap();
            let pr = project_world_to_pixel(&x, &b2w.inverse(), &b2c, &k).unwrap();
            prop_assert!((pr.pixel.u - u).abs() < 1e-6 && (pr.pixel.v - v).abs() < 1e-6);
            prop_assert!((pr.depth - d).abs() < 1e-9);
        }

        #[test]
        fn densify_matches_brute_force(
            samples in prop::collection::vec((0usize..12, 0usize..9, 0.5f64..20.0), 1..6),
            radius in 0usize..6,
        ) {
            let mut img = DepthImage::invalid(12, 9);
            for (x, y, d) in samples {
                img.set(x, y, d);
            }
            let out = densify_depth(&img, radius).unwrap();
            for y in 0..9 {
                for x in 0..12 {
                    prop_assert_eq!(out.get(x, y), nearest_oracle(&img, x, y, radius));
                }
            }
        }
    }
}
