//! Pinhole cameras, Plücker rays and algebraic triangulation.
//!
//! Everything in here works in meters. Datasets store millimeters; the
//! conversion lives in [`crate::synthdata`].

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3};
use thiserror::Error;

/// World-space point in meters.
pub type Point3 = Vector3<f64>;

/// Below this norm of `d_q × d_k` two rays are treated as parallel.
pub const PARALLEL_EPS: f64 = 1e-9;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("intrinsic matrix is singular")]
    SingularIntrinsics,
    #[error("triangulation needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("degenerate triangulation system")]
    Degenerate,
}

/// A calibrated, distortion-free pinhole camera.
///
/// `r` and `t` map world to camera coordinates: `x_cam = R x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl CameraParams {
    /// Builds a camera after checking the rotation and intrinsics invariants.
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let cam = Self { k, r, t };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).abs().max();
        if !(ortho < ROTATION_TOL) {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation not orthonormal (max |RᵀR - I| = {ortho:e})"
            )));
        }
        let det = self.r.determinant();
        if !((det - 1.0).abs() < ROTATION_TOL) {
            return Err(GeometryError::InvalidCamera(format!("rotation determinant {det}")));
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(GeometryError::InvalidCamera("intrinsics not upper triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(GeometryError::InvalidCamera("intrinsics diagonal must be positive".into()));
        }
        if !self.center().iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("camera center not finite".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Point3 {
        -(self.r.transpose() * self.t)
    }

    /// 3×4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &self.t);
        self.k * rt
    }

    /// Builds a camera at `center` looking at `target`, with z-up world and
    /// the usual x-right, y-down, z-forward camera axes.
    pub fn look_at(k: Matrix3<f64>, center: Point3, target: Point3) -> Result<Self, GeometryError> {
        let forward = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("look-at target equals center".into()))?;
        let right = forward
            .cross(&Vector3::z())
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("look direction is vertical".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * center);
        Self::new(k, r, t)
    }
}

/// A 3D line in Plücker coordinates: unit direction `d` and moment `m = p × d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    pub d: Vector3<f64>,
    pub m: Vector3<f64>,
}

impl PluckerRay {
    /// Line through `point` with direction `dir` (normalized here).
    pub fn from_point_direction(point: &Point3, dir: &Vector3<f64>) -> Self {
        let d = dir.normalize();
        Self { d, m: point.cross(&d) }
    }

    /// Closest point on the line to the origin.
    pub fn closest_point_to_origin(&self) -> Point3 {
        self.d.cross(&self.m)
    }

    /// Re-expresses the ray after the rigid map `x ↦ rot (x - origin)`.
    pub fn transformed(&self, rot: &Matrix3<f64>, origin: &Point3) -> Self {
        // m' = rot (p - o) × rot d = rot (m - o × d)
        Self { d: rot * self.d, m: rot * (self.m - origin.cross(&self.d)) }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.d.x, self.d.y, self.d.z, self.m.x, self.m.y, self.m.z]
    }
}

/// Projects a world point to pixel coordinates.
pub fn project(camera: &CameraParams, p: &Point3) -> Result<(f64, f64), GeometryError> {
    let pc = camera.r * p + camera.t;
    if !(pc.z > 0.0) {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    let h = camera.k * pc;
    Ok((h.x / h.z, h.y / h.z))
}

/// Back-projects a pixel to the world ray through the camera center.
pub fn pixel_to_ray(camera: &CameraParams, u: f64, v: f64) -> Result<PluckerRay, GeometryError> {
    let k_inv = camera.k.try_inverse().ok_or(GeometryError::SingularIntrinsics)?;
    let dir = camera.r.transpose() * (k_inv * Vector3::new(u, v, 1.0));
    let norm = dir.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(GeometryError::SingularIntrinsics);
    }
    let d = dir / norm;
    Ok(PluckerRay { d, m: camera.center().cross(&d) })
}

/// Shortest distance between two lines.
pub fn ray_distance(q: &PluckerRay, k: &PluckerRay) -> f64 {
    let cross = q.d.cross(&k.d);
    let n = cross.norm();
    if n < PARALLEL_EPS {
        // Orient k like q so the moment difference is meaningful for
        // anti-parallel lines too.
        let mk = if q.d.dot(&k.d) < 0.0 { -k.m } else { k.m };
        q.d.cross(&(q.m - mk)).norm()
    } else {
        (q.d.dot(&k.m) + k.d.dot(&q.m)).abs() / n
    }
}

/// Distance from a point to a line.
pub fn ray_point_distance(r: &PluckerRay, p: &Point3) -> f64 {
    let q0 = r.closest_point_to_origin();
    r.d.cross(&(p - q0)).norm()
}

/// One 2D observation for triangulation.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub camera: &'a CameraParams,
    pub pixel: (f64, f64),
    pub confidence: f64,
}

/// Linear (DLT) triangulation. With `weighted`, both rows of each
/// observation are scaled by its confidence.
pub fn triangulate_dlt(observations: &[Observation<'_>], weighted: bool) -> Result<Point3, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::TooFewObservations(observations.len()));
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, obs) in observations.iter().enumerate() {
        let p = obs.camera.projection_matrix();
        let w = if weighted { obs.confidence } else { 1.0 };
        let (u, v) = obs.pixel;
        for c in 0..4 {
            a[(2 * i, c)] = w * (u * p[(2, c)] - p[(0, c)]);
            a[(2 * i + 1, c)] = w * (v * p[(2, c)] - p[(1, c)]);
        }
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(GeometryError::Degenerate);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::Degenerate)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if !(sv[second] > 1e-12 * sv[order[sv.len() - 1]]) {
        return Err(GeometryError::Degenerate);
    }
    let x = v_t.row(smallest);
    let w = x[3];
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(w.abs() > 1e-12 * scale) {
        return Err(GeometryError::Degenerate);
    }
    Ok(Point3::new(x[0] / w, x[1] / w, x[2] / w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simple_k() -> Matrix3<f64> {
        Matrix3::new(1000.0, 0.0, 500.0, 0.0, 1000.0, 500.0, 0.0, 0.0, 1.0)
    }

    fn identity_cam() -> CameraParams {
        CameraParams::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&identity_cam(), &Point3::new(0.0, 0.0, 1.0)).unwrap(), (0.0, 0.0));
        let cam = CameraParams::new(simple_k(), Matrix3::identity(), Vector3::zeros()).unwrap();
        assert_eq!(project(&cam, &Point3::new(0.0, 0.0, 2.0)).unwrap(), (500.0, 500.0));
        assert_eq!(project(&cam, &Point3::new(0.5, 0.0, 2.0)).unwrap(), (750.0, 500.0));
    }

    #[test]
    fn project_behind_camera_is_error() {
        let err = project(&identity_cam(), &Point3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
    }

    #[test]
    fn pixel_to_ray_examples() {
        let r = pixel_to_ray(&identity_cam(), 0.0, 0.0).unwrap();
        assert_eq!(r.d, Vector3::z());
        assert_eq!(r.m, Vector3::zeros());

        let cam = CameraParams::new(Matrix3::identity(), Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0)).unwrap();
        let r = pixel_to_ray(&cam, 0.0, 0.0).unwrap();
        assert_eq!(r.d, Vector3::z());
        assert_eq!(r.m, Vector3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let mut cam = identity_cam();
        cam.k[(1, 1)] = 0.0;
        assert_eq!(pixel_to_ray(&cam, 1.0, 1.0).unwrap_err(), GeometryError::SingularIntrinsics);
        assert!(cam.validate().is_err());
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(CameraParams::new(Matrix3::identity(), r, Vector3::zeros()).is_err());
        r[(0, 0)] = 1.01;
        assert!(CameraParams::new(Matrix3::identity(), r, Vector3::zeros()).is_err());
    }

    #[test]
    fn ray_distance_examples() {
        let a = PluckerRay { d: Vector3::z(), m: Vector3::zeros() };
        assert_eq!(ray_distance(&a, &a), 0.0);
        let b = PluckerRay { d: Vector3::z(), m: Vector3::new(0.0, -1.0, 0.0) };
        assert_abs_diff_eq!(ray_distance(&a, &b), 1.0, epsilon = 1e-15);
        let x_axis = PluckerRay { d: Vector3::x(), m: Vector3::zeros() };
        let y_up = PluckerRay { d: Vector3::y(), m: Vector3::new(-1.0, 0.0, 0.0) };
        assert_abs_diff_eq!(ray_distance(&x_axis, &y_up), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn antiparallel_rays_use_oriented_moment() {
        let a = PluckerRay::from_point_direction(&Point3::zeros(), &Vector3::z());
        let b = PluckerRay::from_point_direction(&Point3::new(2.0, 0.0, 0.0), &-Vector3::z());
        assert_abs_diff_eq!(ray_distance(&a, &b), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ray_distance(&b, &a), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ray_point_distance_examples() {
        let r = PluckerRay { d: Vector3::z(), m: Vector3::zeros() };
        assert_eq!(ray_point_distance(&r, &Point3::new(0.0, 0.0, 3.0)), 0.0);
        assert_abs_diff_eq!(ray_point_distance(&r, &Point3::new(1.0, 0.0, 5.0)), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn look_at_puts_target_on_principal_axis() {
        let cam = CameraParams::look_at(simple_k(), Point3::new(4.0, 1.0, 1.5), Point3::new(0.0, 0.0, 1.0)).unwrap();
        let (u, v) = project(&cam, &Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(u, 500.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 500.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cam.center(), Point3::new(4.0, 1.0, 1.5), epsilon = 1e-12);
        // world up maps to image up (negative v)
        let (_, v_up) = project(&cam, &Point3::new(0.0, 0.0, 1.5)).unwrap();
        assert!(v_up < 500.0);
    }

    #[test]
    fn dlt_two_views_exact() {
        let target = Point3::new(0.3, -0.2, 1.1);
        let c1 = CameraParams::look_at(simple_k(), Point3::new(4.0, 0.0, 1.5), Point3::new(0.0, 0.0, 1.0)).unwrap();
        let c2 = CameraParams::look_at(simple_k(), Point3::new(0.0, 4.0, 1.2), Point3::new(0.0, 0.0, 1.0)).unwrap();
        let obs = [
            Observation { camera: &c1, pixel: project(&c1, &target).unwrap(), confidence: 1.0 },
            Observation { camera: &c2, pixel: project(&c2, &target).unwrap(), confidence: 0.5 },
        ];
        for weighted in [false, true] {
            let p = triangulate_dlt(&obs, weighted).unwrap();
            assert!((p - target).norm() < 1e-6);
        }
    }

    #[test]
    fn dlt_needs_two_observations() {
        let c1 = identity_cam();
        let obs = [Observation { camera: &c1, pixel: (0.0, 0.0), confidence: 1.0 }];
        assert_eq!(triangulate_dlt(&obs, true).unwrap_err(), GeometryError::TooFewObservations(1));
        assert_eq!(triangulate_dlt(&[], true).unwrap_err(), GeometryError::TooFewObservations(0));
    }

    #[test]
    fn dlt_parallel_rays_degenerate() {
        // Two cameras with identical orientation, observing the principal
        // point: both rays point along +z and never meet.
        let c1 = CameraParams::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros()).unwrap();
        let c2 = CameraParams::new(Matrix3::identity(), Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0)).unwrap();
        let obs = [
            Observation { camera: &c1, pixel: (0.0, 0.0), confidence: 1.0 },
            Observation { camera: &c2, pixel: (0.0, 0.0), confidence: 1.0 },
        ];
        assert_eq!(triangulate_dlt(&obs, false).unwrap_err(), GeometryError::Degenerate);
    }
}
