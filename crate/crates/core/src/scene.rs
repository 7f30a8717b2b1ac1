//! Random scene poses for datasets and benchmarks.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_axes, project_point, CameraIntrinsics, Pose};

/// Consecutive rejections before the sampler gives up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no acceptable pose after {0} consecutive rejections")]
pub struct SamplingExhausted(pub usize);

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSampler {
    pub depth_min: f64,
    pub depth_max: f64,
    /// Lateral offset bound as a fraction of depth.
    pub lateral_frac: f64,
    pub axis_len: f64,
    /// Each projected axis must be at least this fraction of its
    /// fronto-parallel length.
    pub min_axis_frac: f64,
    /// Minimum angle between any two projected axis lines.
    pub min_axis_angle_deg: f64,
    /// Margin kept between projected model points and the image border.
    pub margin_px: f64,
    /// Half-extent of the rendered cuboid, kept inside the image too.
    pub half_extent: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            depth_min: 3.5,
            depth_max: 5.0,
            lateral_frac: 0.1,
            axis_len: 1.0,
            min_axis_frac: 0.5,
            min_axis_angle_deg: 15.0,
            margin_px: 2.0,
            half_extent: 0.5,
        }
    }
}

impl PoseSampler {
    pub fn accepts(&self, k: &CameraIntrinsics, pose: &Pose) -> bool {
        let Ok(lines) = project_axes(k, pose, self.axis_len) else {
            return false;
        };
        let full = k.f_x.min(k.f_y) * self.axis_len / pose.translation.z;
        if lines.length_px.iter().any(|&l| l < self.min_axis_frac * full) {
            return false;
        }
        let min_sin = self.min_axis_angle_deg.to_radians().sin();
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (lines.dir[i], lines.dir[j]);
                if (a.x * b.y - a.y * b.x).abs() < min_sin {
                    return false;
                }
            }
        }
        let h = self.half_extent.max(self.axis_len);
        let inside = |x: f64, y: f64, z: f64| {
            project_point(k, pose, &Vector3::new(x, y, z)).is_ok_and(|p| {
                p.x >= self.margin_px
                    && p.y >= self.margin_px
                    && p.x <= k.width as f64 - 1.0 - self.margin_px
                    && p.y <= k.height as f64 - 1.0 - self.margin_px
            })
        };
        for &x in &[-h, h] {
            for &y in &[-h, h] {
                for &z in &[-h, h] {
                    if !inside(x, y, z) {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        k: &CameraIntrinsics,
        rng: &mut R,
    ) -> Result<Pose, SamplingExhausted> {
        self.sample_where(k, rng, |_| true)
    }

    /// Like [`sample`](Self::sample) with an extra acceptance test, sharing
    /// the same rejection budget.
    pub fn sample_where<R: Rng + ?Sized>(
        &self,
        k: &CameraIntrinsics,
        rng: &mut R,
        mut extra: impl FnMut(&Pose) -> bool,
    ) -> Result<Pose, SamplingExhausted> {
        for _ in 0..MAX_REJECTIONS {
            let rotation = random_rotation(rng);
            let z = rng.random_range(self.depth_min..=self.depth_max);
            let lx = rng.random_range(-self.lateral_frac..=self.lateral_frac) * z;
            let ly = rng.random_range(-self.lateral_frac..=self.lateral_frac) * z;
            let pose = Pose::new(rotation, Vector3::new(lx, ly, z));
            if self.accepts(k, &pose) && extra(&pose) {
                return Ok(pose);
            }
        }
        Err(SamplingExhausted(MAX_REJECTIONS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_axes_are_uniform_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mean = Matrix3::zeros();
        let n = 20_000;
        for _ in 0..n {
            mean += random_rotation(&mut rng);
        }
        mean /= n as f64;
        assert!(mean.abs().max() < 0.03);
    }

    #[test]
    fn sampled_poses_are_accepted() {
        let k = CameraIntrinsics::reference();
        let s = PoseSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = s.sample(&k, &mut rng).unwrap();
            assert!(s.accepts(&k, &p));
            assert!(p.translation.z >= s.depth_min && p.translation.z <= s.depth_max);
        }
    }

    #[test]
    fn impossible_band_exhausts() {
        let k = CameraIntrinsics::reference();
        let s = PoseSampler {
            depth_min: 0.3,
            depth_max: 0.4,
            ..PoseSampler::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(s.sample(&k, &mut rng), Err(SamplingExhausted(MAX_REJECTIONS)));
    }

    #[test]
    fn extra_test_shares_the_budget() {
        let k = CameraIntrinsics::reference();
        let s = PoseSampler::default();
        let mut calls = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = s.sample_where(&k, &mut rng, |_| {
            calls += 1;
            false
        });
        assert_eq!(r, Err(SamplingExhausted(MAX_REJECTIONS)));
        assert!(calls > 0 && calls <= MAX_REJECTIONS);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = s.sample_where(&k, &mut rng, |p| p.translation.z > 4.5).unwrap();
        assert!(p.translation.z > 4.5 && s.accepts(&k, &p));
    }

    #[test]
    fn edge_on_axis_is_rejected() {
        let k = CameraIntrinsics::reference();
        let s = PoseSampler::default();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 4.0));
        // Z points straight at the camera
        assert!(!s.accepts(&k, &pose));
    }
}
