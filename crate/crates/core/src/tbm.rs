//! Triaxial back-projection: pose from the image of a cube corner.
//!
//! With the corner's image `x_O` and one image point `x_i` on each leg, the
//! camera-frame points are `X_O = K⁻¹x_O` (depth normalized to one) and
//! `X_i = λ_i K⁻¹x_i`. Mutual orthogonality of the legs `X_i - X_O` gives
//! three bilinear equations in `λ_A, λ_B, λ_C`. Eliminating `λ_B` and
//! `λ_C` leaves a quadratic in `λ_A`.

use nalgebra::{Matrix3, Vector2, Vector3, SVD};
use thiserror::Error;

use crate::camera::{
    compute_omega, project_axes_with_lengths, CameraIntrinsics, GeometryError, Omega, Pose,
};
use crate::extract::AxisObservation;

/// Distance of the leg sample points from the corner image, in pixels.
pub const DEFAULT_PROBE_PX: f64 = 10.0;
/// Required bound on every orthogonality equation at an accepted solution.
pub const MAX_RESIDUAL: f64 = 1e-9;
const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("no real solution with all depth scales positive")]
    NoValidSolution,
    #[error("depth-scale elimination is ill-conditioned (denominator {0:e})")]
    IllConditioned(f64),
    #[error("every candidate corner has a left-handed leg frame")]
    AllCandidatesRejected,
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl SolveError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::NoValidSolution => "NoValidSolution",
            Self::IllConditioned(_) => "IllConditioned",
            Self::AllCandidatesRejected => "AllCandidatesRejected",
            Self::InvalidInput(_) => "InvalidInput",
            Self::Geometry(_) => "Geometry",
        }
    }
}

/// Homogeneous image points of the corner and one point on each leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerImage {
    pub x_o: Vector3<f64>,
    pub x_a: Vector3<f64>,
    pub x_b: Vector3<f64>,
    pub x_c: Vector3<f64>,
}

impl CornerImage {
    pub fn legs(&self) -> [Vector3<f64>; 3] {
        [self.x_a, self.x_b, self.x_c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSolution {
    /// `(λ_A, λ_B, λ_C)` with `λ_O = 1`.
    pub lambda: [f64; 3],
    /// Camera-frame legs `λ_i K⁻¹x_i − K⁻¹x_O`.
    pub legs: [Vector3<f64>; 3],
    /// Largest absolute orthogonality-equation value.
    pub residual: f64,
}

/// Leg lengths of B and C relative to A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegRatios {
    pub r_b: f64,
    pub r_c: f64,
}

impl Default for LegRatios {
    fn default() -> Self {
        Self { r_b: 1.0, r_c: 1.0 }
    }
}

impl LegRatios {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.r_b > 0.0 && self.r_c > 0.0 && self.r_b.is_finite() && self.r_c.is_finite() {
            Ok(())
        } else {
            Err(SolveError::InvalidInput(format!(
                "leg ratios must be positive (r_b={}, r_c={})",
                self.r_b, self.r_c
            )))
        }
    }

    pub fn lengths(&self) -> [f64; 3] {
        [1.0, self.r_b, self.r_c]
    }
}

fn homogenize(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

pub fn corner_from_observation(obs: &AxisObservation, probe_px: f64) -> CornerImage {
    let at = |i: usize| homogenize(&(obs.origin_px + obs.dir[i] * probe_px));
    CornerImage {
        x_o: homogenize(&obs.origin_px),
        x_a: at(0),
        x_b: at(1),
        x_c: at(2),
    }
}

/// The three orthogonality equations, ordered (A,B), (B,C), (C,A).
pub fn orthogonality_residuals(corner: &CornerImage, omega: &Omega, lambda: [f64; 3]) -> [f64; 3] {
    let d = |a: &Vector3<f64>, b: &Vector3<f64>| omega.form(a, b);
    let (o, a, b, c) = (&corner.x_o, &corner.x_a, &corner.x_b, &corner.x_c);
    let [la, lb, lc] = lambda;
    let d_oo = d(o, o);
    [
        la * lb * d(a, b) - la * d(a, o) - lb * d(b, o) + d_oo,
        lb * lc * d(b, c) - lb * d(b, o) - lc * d(c, o) + d_oo,
        lc * la * d(c, a) - lc * d(c, o) - la * d(a, o) + d_oo,
    ]
}

// polynomial helpers on coefficient arrays, lowest degree first
fn poly_mul1(p: [f64; 2], q: [f64; 2]) -> [f64; 3] {
    [p[0] * q[0], p[0] * q[1] + p[1] * q[0], p[1] * q[1]]
}

fn poly_eval(p: &[f64; 3], x: f64) -> f64 {
    (p[2] * x + p[1]) * x + p[0]
}

/// Real roots of `p[2] x² + p[1] x + p[0]`, polished by Newton steps.
fn real_roots(p: &[f64; 3]) -> Vec<f64> {
    let [c, b, a] = *p;
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    let mut roots = Vec::with_capacity(2);
    if a.abs() <= 1e-14 * scale {
        if b != 0.0 {
            roots.push(-c / b);
        }
    } else {
        let mut disc = b * b - 4.0 * a * c;
        // a tangential double root can come out slightly negative
        if disc < 0.0 && disc > -1e-12 * b * b {
            disc = 0.0;
        }
        if disc >= 0.0 {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            if q != 0.0 {
                roots.push(q / a);
                roots.push(c / q);
            } else {
                roots.push(0.0);
            }
        }
    }
    for r in roots.iter_mut() {
        for _ in 0..2 {
            let f = poly_eval(p, *r);
            let df = 2.0 * a * *r + b;
            if df != 0.0 && df.is_finite() {
                let step = f / df;
                if step.is_finite() {
                    *r -= step;
                }
            }
        }
    }
    roots
}

/// Upper-triangular `U` with `Ω = UᵀU`; for a conic built from `K` this is
/// exactly `K⁻¹`.
fn back_projector(omega: &Omega) -> Result<Matrix3<f64>, SolveError> {
    let chol = nalgebra::Cholesky::new(omega.m)
        .ok_or_else(|| SolveError::InvalidInput("conic matrix is not positive definite".into()))?;
    Ok(chol.l().transpose())
}

/// Solves the corner orthogonality system for the depth scales.
pub fn solve_depth_scales(
    corner: &CornerImage,
    omega: &Omega,
) -> Result<Vec<CornerSolution>, SolveError> {
    let kinv = back_projector(omega)?;
    let d = |a: &Vector3<f64>, b: &Vector3<f64>| omega.form(a, b);
    let (o, a, b, c) = (&corner.x_o, &corner.x_a, &corner.x_b, &corner.x_c);
    let (d_oo, d_ao, d_bo, d_co) = (d(o, o), d(a, o), d(b, o), d(c, o));
    let (d_ab, d_bc, d_ca) = (d(a, b), d(b, c), d(c, a));

    // λ_B = N / D_B and λ_C = N / D_C, all linear in λ_A
    let n = [-d_oo, d_ao];
    let den_b = [-d_bo, d_ab];
    let den_c = [-d_co, d_ca];

    // (B,C) row times D_B D_C
    let nn = poly_mul1(n, n);
    let n_dc = poly_mul1(n, den_c);
    let n_db = poly_mul1(n, den_b);
    let db_dc = poly_mul1(den_b, den_c);
    let mut poly = [0.0; 3];
    for k in 0..3 {
        poly[k] = d_bc * nn[k] - d_bo * n_dc[k] - d_co * n_db[k] + d_oo * db_dc[k];
    }

    let mut out = Vec::new();
    let mut worst_den: Option<f64> = None;
    for la in real_roots(&poly) {
        if !(la > 0.0 && la.is_finite()) {
            continue;
        }
        let num = n[1] * la + n[0];
        let db = den_b[1] * la + den_b[0];
        let dc = den_c[1] * la + den_c[0];
        let small = db.abs().min(dc.abs());
        if small < MIN_DENOMINATOR {
            worst_den = Some(worst_den.map_or(small, |w: f64| w.min(small)));
            continue;
        }
        let lambda = [la, num / db, num / dc];
        if !lambda.iter().all(|l| *l > 0.0 && l.is_finite()) {
            continue;
        }
        let residual = orthogonality_residuals(corner, omega, lambda)
            .iter()
            .fold(0.0f64, |m, r| m.max(r.abs()));
        if !(residual < MAX_RESIDUAL) {
            continue;
        }
        let x_o = kinv * o;
        let legs = [
            kinv * a * lambda[0] - x_o,
            kinv * b * lambda[1] - x_o,
            kinv * c * lambda[2] - x_o,
        ];
        out.push(CornerSolution {
            lambda,
            legs,
            residual,
        });
    }
    if out.is_empty() {
        return Err(match worst_den {
            Some(den) => SolveError::IllConditioned(den),
            None => SolveError::NoValidSolution,
        });
    }
    Ok(out)
}

/// Nearest rotation to `m` in the Frobenius sense (orthogonal polar factor).
/// Returns `None` when `det m <= 0`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if !(m.determinant() > 0.0) {
        return None;
    }
    let svd = SVD::new(*m, true, true);
    let r = svd.u? * svd.v_t?;
    if r.determinant() > 0.0 {
        Some(r)
    } else {
        None
    }
}

/// Sum of angles (radians) between reprojected and observed directions.
fn reprojection_residual(
    k: &CameraIntrinsics,
    pose: &Pose,
    lengths: [f64; 3],
    obs: &AxisObservation,
) -> f64 {
    match project_axes_with_lengths(k, pose, lengths) {
        Ok(lines) => (0..3)
            .map(|i| lines.dir[i].dot(&obs.dir[i]).clamp(-1.0, 1.0).acos())
            .sum(),
        Err(_) => f64::INFINITY,
    }
}

/// One candidate pose from a corner solution.
#[derive(Debug, Clone, Copy)]
pub struct PoseCandidate {
    pub pose: Pose,
    pub solution: CornerSolution,
    pub reprojection: f64,
}

/// Recovers the pose; `scale_lambda_o` is the depth of the object origin.
pub fn recover_pose(
    obs: &AxisObservation,
    k: &CameraIntrinsics,
    ratios: &LegRatios,
    scale_lambda_o: f64,
) -> Result<Pose, SolveError> {
    recover_pose_with_probe(obs, k, ratios, scale_lambda_o, DEFAULT_PROBE_PX).map(|c| c.pose)
}

pub fn recover_pose_with_probe(
    obs: &AxisObservation,
    k: &CameraIntrinsics,
    ratios: &LegRatios,
    scale_lambda_o: f64,
    probe_px: f64,
) -> Result<PoseCandidate, SolveError> {
    ratios.validate()?;
    k.validate()?;
    if !(scale_lambda_o > 0.0 && scale_lambda_o.is_finite()) {
        return Err(SolveError::InvalidInput(format!(
            "scale must be positive, got {scale_lambda_o}"
        )));
    }
    if !(probe_px > 0.0) {
        return Err(SolveError::InvalidInput(format!("probe must be positive, got {probe_px}")));
    }
    let corner = corner_from_observation(obs, probe_px);
    let omega = compute_omega(k);
    let solutions = solve_depth_scales(&corner, &omega)?;
    let translation = k.inverse() * corner.x_o * scale_lambda_o;
    let lengths = ratios.lengths();

    let mut best: Option<PoseCandidate> = None;
    for sol in solutions {
        let m = Matrix3::from_columns(&[
            sol.legs[0].normalize(),
            sol.legs[1].normalize(),
            sol.legs[2].normalize(),
        ]);
        let Some(rotation) = nearest_rotation(&m) else {
            continue;
        };
        let pose = Pose::new(rotation, translation);
        let reprojection = reprojection_residual(k, &pose, lengths, obs);
        if best.as_ref().is_none_or(|b| reprojection < b.reprojection) {
            best = Some(PoseCandidate {
                pose,
                solution: sol,
                reprojection,
            });
        }
    }
    best.ok_or(SolveError::AllCandidatesRejected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project_axes, project_camera_point, rot_x, rot_y};

    fn k128() -> CameraIntrinsics {
        CameraIntrinsics::simple(100.0, 64.0, 64.0, 128).unwrap()
    }

    fn geodesic(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn corner_points_sit_at_probe_distance() {
        let mut obs = AxisObservation::zeros();
        obs.origin_px = Vector2::new(64.0, 64.0);
        obs.dir = [
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(-0.6, -0.8),
        ];
        let c = corner_from_observation(&obs, 10.0);
        assert_eq!(c.x_a, Vector3::new(74.0, 64.0, 1.0));
        for x in c.legs() {
            assert!(((x - c.x_o).norm() - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_projected_triad_is_recovered() {
        let k = k128();
        let r = rot_x(20.0) * rot_y(30.0);
        let t = Vector3::new(0.2, -0.1, 5.0);
        // leg points on each axis, at different distances
        let pts = [0.7, 1.3, 0.9];
        let x_o = project_camera_point(&k, &t).unwrap();
        let mut xs = [Vector3::zeros(); 3];
        let mut lambda_true = [0.0; 3];
        for i in 0..3 {
            let p = t + r.column(i) * pts[i];
            let px = project_camera_point(&k, &p).unwrap();
            xs[i] = Vector3::new(px.x, px.y, 1.0);
            lambda_true[i] = p.z / t.z;
        }
        let corner = CornerImage {
            x_o: Vector3::new(x_o.x, x_o.y, 1.0),
            x_a: xs[0],
            x_b: xs[1],
            x_c: xs[2],
        };
        let omega = compute_omega(&k);
        for res in orthogonality_residuals(&corner, &omega, lambda_true) {
            assert!(res.abs() < 1e-12, "ground truth residual {res}");
        }
        let sols = solve_depth_scales(&corner, &omega).unwrap();
        let hit = sols.iter().any(|s| {
            (0..3).all(|i| ((s.lambda[i] - lambda_true[i]) / lambda_true[i]).abs() < 1e-9)
        });
        assert!(hit, "{sols:?} vs {lambda_true:?}");
        for s in &sols {
            assert!(s.residual < MAX_RESIDUAL);
        }
    }

    #[test]
    fn round_trip_recovers_pose() {
        let k = k128();
        let pose = Pose::new(rot_x(20.0) * rot_y(30.0), Vector3::new(0.2, -0.1, 5.0));
        let obs = AxisObservation::from_lines(&project_axes(&k, &pose, 1.0).unwrap());
        let got = recover_pose(&obs, &k, &LegRatios::default(), 5.0).unwrap();
        assert!(geodesic(&got.rotation, &pose.rotation) < 1e-9);
        assert!((got.translation - pose.translation).norm() < 1e-9);
        assert!(got.validate(1e-9).is_ok());

        let scaled = recover_pose(&obs, &k, &LegRatios::default(), 10.0).unwrap();
        assert!((scaled.translation - got.translation * 2.0).norm() < 1e-12);
        assert!(geodesic(&scaled.rotation, &got.rotation) < 1e-12);
    }

    #[test]
    fn probe_distance_does_not_matter() {
        let k = k128();
        let pose = Pose::new(rot_x(-35.0) * rot_y(50.0), Vector3::new(-0.3, 0.2, 6.0));
        let obs = AxisObservation::from_lines(&project_axes(&k, &pose, 1.0).unwrap());
        let ratios = LegRatios::default();
        let base = recover_pose_with_probe(&obs, &k, &ratios, 6.0, 5.0).unwrap().pose;
        for probe in [10.0, 50.0] {
            let p = recover_pose_with_probe(&obs, &k, &ratios, 6.0, probe).unwrap().pose;
            assert!(geodesic(&p.rotation, &base.rotation) < 1e-9);
        }
    }

    #[test]
    fn coincident_lines_fail() {
        let mut obs = AxisObservation::zeros();
        obs.origin_px = Vector2::new(50.0, 60.0);
        obs.dir = [Vector2::new(1.0, 0.0); 3];
        let corner = corner_from_observation(&obs, 10.0);
        let err = solve_depth_scales(&corner, &compute_omega(&k128())).unwrap_err();
        assert!(matches!(
            err,
            SolveError::IllConditioned(_) | SolveError::NoValidSolution
        ));
    }

    #[test]
    fn mirrored_frame_is_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(nearest_rotation(&m).is_none());
        let r = nearest_rotation(&(rot_x(10.0) * 2.0)).unwrap();
        assert!((r - rot_x(10.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let k = k128();
        let pose = Pose::new(rot_x(20.0) * rot_y(30.0), Vector3::new(0.2, -0.1, 5.0));
        let obs = AxisObservation::from_lines(&project_axes(&k, &pose, 1.0).unwrap());
        assert!(recover_pose(&obs, &k, &LegRatios::default(), 0.0).is_err());
        let bad = LegRatios { r_b: -1.0, r_c: 1.0 };
        assert!(recover_pose(&obs, &k, &bad, 5.0).is_err());
    }

    #[test]
    fn quadratic_roots() {
        // (x - 2)(x + 3) = x² + x - 6
        let mut r = real_roots(&[-6.0, 1.0, 1.0]);
        r.sort_by(f64::total_cmp);
        assert!((r[0] + 3.0).abs() < 1e-14 && (r[1] - 2.0).abs() < 1e-14);
        assert!(real_roots(&[1.0, 0.0, 1.0]).is_empty());
        assert_eq!(real_roots(&[-4.0, 2.0, 0.0]), vec![2.0]);
    }
}
