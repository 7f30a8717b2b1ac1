//! Pinhole camera model, the image-of-absolute-conic matrix and forward
//! projection of an object's tri-axis into directed image lines.
//!
//! Pixel coordinates put the center of pixel `(i, j)` at `(i, j)`, so an
//! image of width `W` covers `[-0.5, W - 0.5)` horizontally.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point is treated as lying at or behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Projected axes shorter than this (pixels) have no usable direction.
pub const DEGENERATE_AXIS_PX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Axis {
        Axis::ALL[i]
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point depth {depth} is not in front of the camera")]
    NonPositiveDepth { depth: f64 },
    #[error("axis {0} projects to a point (aligned with the viewing ray)")]
    DegenerateAxis(Axis),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a proper rotation (orthogonality error {ortho:e}, det {det})")]
    InvalidRotation { ortho: f64, det: f64 },
}

/// Pinhole intrinsics. Serialized as the flat record used in dataset manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f_x: f64,
    pub f_y: f64,
    pub gamma: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        f_x: f64,
        f_y: f64,
        gamma: f64,
        c_x: f64,
        c_y: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            f_x,
            f_y,
            gamma,
            c_x,
            c_y,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square image with equal focal lengths and zero skew.
    pub fn simple(focal: f64, c_x: f64, c_y: f64, size: u32) -> Result<Self, GeometryError> {
        Self::new(focal, focal, 0.0, c_x, c_y, size, size)
    }

    /// The 128x128, f = 100 camera that all pixel thresholds refer to.
    pub fn reference() -> Self {
        Self {
            f_x: 100.0,
            f_y: 100.0,
            gamma: 0.0,
            c_x: 64.0,
            c_y: 64.0,
            width: 128,
            height: 128,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.f_x, self.f_y, self.gamma, self.c_x, self.c_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if !(self.f_x > 0.0 && self.f_y > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (f_x={}, f_y={})",
                self.f_x, self.f_y
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("empty image".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.f_x, self.gamma, self.c_x, //
            0.0, self.f_y, self.c_y, //
            0.0, 0.0, 1.0,
        )
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse(&self) -> Matrix3<f64> {
        let (fx, fy, g, cx, cy) = (self.f_x, self.f_y, self.gamma, self.c_x, self.c_y);
        Matrix3::new(
            1.0 / fx,
            -g / (fx * fy),
            (g * cy - cx * fy) / (fx * fy),
            0.0,
            1.0 / fy,
            -cy / fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Back-projects a pixel to the camera-frame ray point at unit depth.
    pub fn back_project(&self, px: &Vector2<f64>) -> Vector3<f64> {
        self.inverse() * Vector3::new(px.x, px.y, 1.0)
    }

    /// Intrinsics of the same camera resampled to a `width` x `height` grid.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            f_x: self.f_x * sx,
            f_y: self.f_y * sy,
            gamma: self.gamma * sx,
            c_x: (self.c_x + 0.5) * sx - 0.5,
            c_y: (self.c_y + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Rigid object-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotation.into_inner(), translation)
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        let det = r.determinant();
        if ortho > tol || (det - 1.0).abs() > tol || !ortho.is_finite() {
            return Err(GeometryError::InvalidRotation { ortho, det });
        }
        Ok(())
    }

    pub fn transform(&self, x_obj: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_obj + self.translation
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        Self::new(
            Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            Vector3::new(a[9], a[10], a[11]),
        )
    }

    /// Applies a camera-frame rotation on the left of the pose.
    pub fn rotated_in_camera(&self, rot: &Matrix3<f64>) -> Self {
        Self::new(rot * self.rotation, rot * self.translation)
    }
}

/// Symmetric positive-definite conic matrix `K⁻ᵀ K⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Omega {
    pub m: Matrix3<f64>,
}

impl Omega {
    /// Bilinear form `aᵀ Ω b`.
    pub fn form(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        a.dot(&(self.m * b))
    }
}

pub fn compute_omega(k: &CameraIntrinsics) -> Omega {
    let kinv = k.inverse();
    let m = kinv.transpose() * kinv;
    // exact symmetry; the product is symmetric up to rounding
    let m = (m + m.transpose()) * 0.5;
    Omega { m }
}

/// Directed image lines of the three object axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisLines {
    pub origin_px: Vector2<f64>,
    pub dir: [Vector2<f64>; 3],
    /// `dir.y / dir.x`; infinite for vertical lines.
    pub slope: [f64; 3],
    /// Pixel length of each projected axis segment.
    pub length_px: [f64; 3],
}

pub fn slope_of(dir: &Vector2<f64>) -> f64 {
    if dir.x.abs() > 1e-12 {
        dir.y / dir.x
    } else if dir.y >= 0.0 {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    }
}

/// Projects an object-frame point to pixels.
pub fn project_point(
    k: &CameraIntrinsics,
    pose: &Pose,
    x_obj: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    project_camera_point(k, &pose.transform(x_obj))
}

/// Projects a camera-frame point to pixels.
pub fn project_camera_point(
    k: &CameraIntrinsics,
    x_cam: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let depth = x_cam.z;
    if !(depth > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    let h = k.matrix() * x_cam;
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

/// Projects the object origin and the three axis endpoints at `axis_len`.
pub fn project_axes(
    k: &CameraIntrinsics,
    pose: &Pose,
    axis_len: f64,
) -> Result<AxisLines, GeometryError> {
    project_axes_with_lengths(k, pose, [axis_len; 3])
}

pub fn project_axes_with_lengths(
    k: &CameraIntrinsics,
    pose: &Pose,
    axis_len: [f64; 3],
) -> Result<AxisLines, GeometryError> {
    let origin_px = project_point(k, pose, &Vector3::zeros())?;
    let mut dir = [Vector2::zeros(); 3];
    let mut slope = [0.0; 3];
    let mut length_px = [0.0; 3];
    for axis in Axis::ALL {
        let i = axis.index();
        let mut end = Vector3::zeros();
        end[i] = axis_len[i];
        let d = project_point(k, pose, &end)? - origin_px;
        let len = d.norm();
        if !(len >= DEGENERATE_AXIS_PX) {
            return Err(GeometryError::DegenerateAxis(axis));
        }
        dir[i] = d / len;
        slope[i] = slope_of(&dir[i]);
        length_px[i] = len;
    }
    Ok(AxisLines {
        origin_px,
        dir,
        slope,
        length_px,
    })
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()).into_inner()
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).into_inner()
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::simple(100.0, 64.0, 64.0, 128).unwrap()
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0));
        let p = project_point(&k100(), &pose, &Vector3::zeros()).unwrap();
        assert_eq!(p, Vector2::new(64.0, 64.0));
        let p = project_point(&k100(), &pose, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p, Vector2::new(84.0, 64.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0));
        let err = project_point(&k100(), &pose, &Vector3::zeros()).unwrap_err();
        assert!(matches!(err, GeometryError::NonPositiveDepth { .. }));
    }

    #[test]
    fn omega_matches_hand_computation() {
        let om = compute_omega(&k100());
        let expected = Matrix3::new(
            1e-4, 0.0, -6.4e-3, //
            0.0, 1e-4, -6.4e-3, //
            -6.4e-3, -6.4e-3, 1.8192,
        );
        assert_relative_eq!(om.m, expected, epsilon = 1e-15);
        let unit = CameraIntrinsics::simple(1.0, 0.0, 0.0, 8).unwrap();
        assert_relative_eq!(compute_omega(&unit).m, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn omega_is_positive_definite_and_measures_ray_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = CameraIntrinsics::new(
                rng.random_range(20.0..500.0),
                rng.random_range(20.0..500.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                200,
                200,
            )
            .unwrap();
            let om = compute_omega(&k);
            assert_relative_eq!(om.m, om.m.transpose(), epsilon = 1e-12);
            let kinv = k.inverse();
            for _ in 0..100 {
                let x = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if x.norm() < 1e-6 {
                    continue;
                }
                assert!(om.form(&x, &x) > 0.0);
                let a = Vector3::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), 1.0);
                let b = Vector3::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), 1.0);
                let lhs = om.form(&a, &b);
                let rhs = (kinv * a).dot(&(kinv * b));
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300) + 1e-15);
            }
        }
    }

    #[test]
    fn inverse_is_exact() {
        let k = CameraIntrinsics::new(120.0, 90.0, 2.5, 60.0, 70.0, 128, 128).unwrap();
        assert_relative_eq!(k.inverse() * k.matrix(), Matrix3::identity(), epsilon = 1e-14);
    }

    #[test]
    fn z_axis_along_optical_ray_is_degenerate() {
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(
            project_axes(&k100(), &pose, 1.0).unwrap_err(),
            GeometryError::DegenerateAxis(Axis::Z)
        );
    }

    #[test]
    fn axis_lines_match_projected_endpoints() {
        let pose = Pose::new(rot_x(20.0) * rot_y(30.0), Vector3::new(0.2, -0.1, 5.0));
        let k = k100();
        let lines = project_axes(&k, &pose, 1.0).unwrap();
        let o = project_point(&k, &pose, &Vector3::zeros()).unwrap();
        assert_eq!(lines.origin_px, o);
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = 1.0;
            let d = project_point(&k, &pose, &e).unwrap() - o;
            assert_relative_eq!(lines.dir[i], d / d.norm(), epsilon = 1e-12);
            assert!((lines.dir[i].norm() - 1.0).abs() < 1e-9);
            assert_relative_eq!(lines.slope[i], d.y / d.x, max_relative = 1e-12);
        }
        // projection of a direction does not depend on the axis length
        let longer = project_axes(&k, &pose, 3.0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(longer.dir[i], lines.dir[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn slope_of_vertical_line_is_infinite() {
        assert_eq!(slope_of(&Vector2::new(0.0, 1.0)), f64::INFINITY);
        assert_eq!(slope_of(&Vector2::new(0.0, -1.0)), f64::NEG_INFINITY);
    }

    #[test]
    fn resized_intrinsics_keep_pixel_geometry() {
        let k = k100();
        let small = k.resized(32, 32);
        let pose = Pose::new(rot_x(10.0), Vector3::new(0.3, 0.1, 5.0));
        let p = project_point(&k, &pose, &Vector3::new(0.5, 0.2, 0.1)).unwrap();
        let q = project_point(&small, &pose, &Vector3::new(0.5, 0.2, 0.1)).unwrap();
        // pixel edges map to pixel edges
        assert_relative_eq!((q.x + 0.5) * 4.0, p.x + 0.5, epsilon = 1e-12);
        assert_relative_eq!((q.y + 0.5) * 4.0, p.y + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pose_array_round_trip() {
        let pose = Pose::new(rot_z(12.0) * rot_x(-40.0), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(Pose::from_array(&pose.to_array()), pose);
        assert!(pose.validate(1e-9).is_ok());
        let bad = Pose::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::z());
        assert!(bad.validate(1e-9).is_err());
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0.0, 0, 10).is_err());
        assert!(CameraIntrinsics::new(f64::NAN, 1.0, 0.0, 0.0, 0.0, 10, 10).is_err());
    }
}
