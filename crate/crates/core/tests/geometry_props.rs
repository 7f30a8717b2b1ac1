use axisforge::camera::{compute_omega, project_axes, project_camera_point, CameraIntrinsics, Pose};
use axisforge::extract::AxisObservation;
use axisforge::metrics::rotation_geodesic;
use axisforge::scene::{random_rotation, PoseSampler};
use axisforge::tbm::{
    corner_from_observation, orthogonality_residuals, recover_pose, recover_pose_with_probe,
    solve_depth_scales, LegRatios,
};
use nalgebra::{Rotation2, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (50.0..400.0f64, 0.8..1.25f64, -2.0..2.0f64, 20.0..100.0f64, 20.0..100.0f64).prop_map(
        |(f, aspect, gamma, cx, cy)| CameraIntrinsics::new(f, f * aspect, gamma, cx, cy, 128, 128).unwrap(),
    )
}

fn exact_observation(k: &CameraIntrinsics, pose: &Pose) -> AxisObservation {
    AxisObservation::from_lines(&project_axes(k, pose, 1.0).unwrap())
}

proptest! {
    #[test]
    fn projection_ignores_positive_scale(
        seed in any::<u64>(),
        s in 0.01..100.0f64,
        k in intrinsics(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_rotation(&mut rng);
        let p = r * Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0)
            + Vector3::new(0.0, 0.0, 8.0);
        let a = project_camera_point(&k, &p).unwrap();
        let b = project_camera_point(&k, &(p * s)).unwrap();
        prop_assert!((a - b).norm() <= 1e-9 * a.norm().max(1.0));
    }

    #[test]
    fn omega_measures_back_projected_rays(
        k in intrinsics(),
        a in prop::array::uniform3(-200.0..200.0f64),
        b in prop::array::uniform3(-200.0..200.0f64),
    ) {
        let (a, b) = (Vector3::from(a), Vector3::from(b));
        let lhs = compute_omega(&k).form(&a, &b);
        let kinv = k.inverse();
        let rhs = (kinv * a).dot(&(kinv * b));
        let scale = (kinv * a).norm() * (kinv * b).norm();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * scale.max(1e-300));
    }

    #[test]
    fn exact_lines_recover_pose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::reference();
        let pose = PoseSampler::default().sample(&k, &mut rng).unwrap();
        let got = recover_pose(&exact_observation(&k, &pose), &k, &LegRatios::default(), pose.translation.z).unwrap();
        prop_assert!(rotation_geodesic(&got.rotation, &pose.rotation).to_radians() < 1e-6);
        prop_assert!((got.translation - pose.translation).norm() / pose.translation.norm() < 1e-6);
    }

    #[test]
    fn accepted_solutions_satisfy_orthogonality(seed in any::<u64>(), noise_deg in 0.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::reference();
        let pose = PoseSampler::default().sample(&k, &mut rng).unwrap();
        let mut obs = exact_observation(&k, &pose);
        for d in &mut obs.dir {
            let a: f64 = rng.sample::<f64, _>(StandardNormal) * noise_deg.to_radians();
            *d = Rotation2::new(a) * *d;
        }
        let corner = corner_from_observation(&obs, 10.0);
        let omega = compute_omega(&k);
        if let Ok(sols) = solve_depth_scales(&corner, &omega) {
            for s in sols {
                let r = orthogonality_residuals(&corner, &omega, s.lambda);
                prop_assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
            }
        }
    }

    #[test]
    fn recovered_legs_are_orthogonal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::reference();
        let pose = PoseSampler::default().sample(&k, &mut rng).unwrap();
        let c = recover_pose_with_probe(&exact_observation(&k, &pose), &k, &LegRatios::default(), pose.translation.z, 10.0).unwrap();
        let l = c.solution.legs;
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            let cos = l[i].dot(&l[j]) / (l[i].norm() * l[j].norm());
            prop_assert!((cos.acos() - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        }
    }

    #[test]
    fn probe_distance_does_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::reference();
        let pose = PoseSampler::default().sample(&k, &mut rng).unwrap();
        let obs = exact_observation(&k, &pose);
        // image points past an axis's vanishing point lie behind the camera
        prop_assume!((0..3).all(|i| vanishing_distance(&k, &pose, i) > 55.0));
        let base = recover_pose_with_probe(&obs, &k, &LegRatios::default(), 6.0, 10.0).unwrap().pose;
        for probe in [5.0, 50.0] {
            let p = recover_pose_with_probe(&obs, &k, &LegRatios::default(), 6.0, probe).unwrap().pose;
            prop_assert!(chord_angle(&p.rotation, &base.rotation) < 1e-9);
        }
    }
}

/// Rotation angle from the Frobenius chord, accurate near zero.
fn chord_angle(a: &nalgebra::Matrix3<f64>, b: &nalgebra::Matrix3<f64>) -> f64 {
    2.0 * ((a - b).norm() / (2.0 * 2f64.sqrt())).min(1.0).asin()
}

fn vanishing_distance(k: &CameraIntrinsics, pose: &Pose, axis: usize) -> f64 {
    let l = pose.rotation.column(axis).into_owned();
    if l.z <= 0.0 {
        return f64::INFINITY;
    }
    let vp = project_camera_point(k, &(l / l.z)).unwrap();
    let o = project_camera_point(k, &pose.translation).unwrap();
    (vp - o).norm()
}

#[test]
fn thousand_pose_round_trip() {
    let k = CameraIntrinsics::reference();
    let sampler = PoseSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let pose = sampler.sample(&k, &mut rng).unwrap();
        let got = recover_pose(&exact_observation(&k, &pose), &k, &LegRatios::default(), pose.translation.z).unwrap();
        assert!(rotation_geodesic(&got.rotation, &pose.rotation).to_radians() < 1e-6);
        assert!((got.translation - pose.translation).norm() / pose.translation.norm() < 1e-6);
    }
}

#[test]
fn rotation_error_grows_with_direction_noise() {
    let k = CameraIntrinsics::reference();
    let sampler = PoseSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let poses: Vec<Pose> = (0..200).map(|_| sampler.sample(&k, &mut rng).unwrap()).collect();
    let mut medians = Vec::new();
    for noise_deg in [0.0, 0.5, 2.0] {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(99);
        let mut errs: Vec<f64> = poses
            .iter()
            .map(|pose| {
                let mut obs = exact_observation(&k, pose);
                for d in &mut obs.dir {
                    let a: f64 = noise_rng.sample::<f64, _>(StandardNormal) * f64::to_radians(noise_deg);
                    *d = Rotation2::new(a) * *d;
                }
                match recover_pose(&obs, &k, &LegRatios::default(), pose.translation.z) {
                    Ok(p) => rotation_geodesic(&p.rotation, &pose.rotation),
                    Err(_) => 180.0,
                }
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(errs[100]);
    }
    assert!(medians[0] <= medians[1] && medians[1] <= medians[2], "{medians:?}");
    assert!(medians[2] > medians[0]);
}

#[test]
fn centroid_is_ignored_by_the_solver() {
    let k = CameraIntrinsics::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pose = PoseSampler::default().sample(&k, &mut rng).unwrap();
    let mut obs = exact_observation(&k, &pose);
    let a = recover_pose(&obs, &k, &LegRatios::default(), 6.0).unwrap();
    obs.centroid += Vector2::new(13.0, -4.0);
    let b = recover_pose(&obs, &k, &LegRatios::default(), 6.0).unwrap();
    assert_eq!(a, b);
}
