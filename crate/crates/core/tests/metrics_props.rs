use axisforge::camera::{CameraIntrinsics, Pose};
use axisforge::metrics::{add_metric, reproj_metric, rotation_geodesic, ModelPoints};
use axisforge::scene::random_rotation;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pose(rng: &mut ChaCha8Rng) -> Pose {
    let t = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(4.0..6.0));
    Pose::new(random_rotation(rng), t)
}

/// The 24 proper rotations mapping the cube onto itself.
fn cube_symmetries() -> Vec<Matrix3<f64>> {
    let mut out = Vec::new();
    let perms = [[0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]];
    for p in perms {
        for signs in 0..8 {
            let mut m = Matrix3::zeros();
            for (r, &c) in p.iter().enumerate() {
                m[(r, c)] = if signs >> r & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn add_ignores_a_shared_camera_motion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelPoints::cuboid(0.5);
        let (a, b) = (pose(&mut rng), pose(&mut rng));
        let g = random_rotation(&mut rng);
        let shift = Vector3::new(rng.random_range(-1.0..1.0), 0.3, 2.0);
        let moved = |p: &Pose| Pose::new(g * p.rotation, g * p.translation + shift);
        let base = add_metric(&a, &b, &m);
        prop_assert!((add_metric(&moved(&a), &moved(&b), &m) - base).abs() < 1e-9);
    }

    #[test]
    fn add_ignores_a_shared_object_symmetry(seed in any::<u64>(), which in 0usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelPoints::cuboid(0.5);
        let (a, b) = (pose(&mut rng), pose(&mut rng));
        let q = cube_symmetries()[which];
        let pre = |p: &Pose| Pose::new(p.rotation * q, p.translation);
        prop_assert!((add_metric(&pre(&a), &pre(&b), &m) - add_metric(&a, &b, &m)).abs() < 1e-9);
    }

    #[test]
    fn geodesic_is_a_metric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random_rotation(&mut rng), random_rotation(&mut rng), random_rotation(&mut rng));
        let ab = rotation_geodesic(&a, &b);
        prop_assert!((ab - rotation_geodesic(&b, &a)).abs() < 1e-9);
        prop_assert!(rotation_geodesic(&a, &c) <= ab + rotation_geodesic(&b, &c) + 1e-9);
        prop_assert!((0.0..=180.0).contains(&ab));
    }

    #[test]
    fn reprojection_is_symmetric_and_zero_only_on_a_match(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::reference();
        let m = ModelPoints::cuboid(0.5);
        let (a, b) = (pose(&mut rng), pose(&mut rng));
        let ab = reproj_metric(&a, &b, &m, &k).unwrap();
        prop_assert!((ab - reproj_metric(&b, &a, &m, &k).unwrap()).abs() < 1e-9);
        prop_assert!(ab > 0.0);
        prop_assert_eq!(reproj_metric(&a, &a, &m, &k).unwrap(), 0.0);
        // moving along the optical ray of the origin alone still moves corners
        let mut c = a;
        c.translation *= 1.1;
        prop_assert!(reproj_metric(&a, &c, &m, &k).unwrap() > 0.0);
    }
}

#[test]
fn symmetry_table_is_complete() {
    let s = cube_symmetries();
    assert_eq!(s.len(), 24);
    for m in &s {
        assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-12);
    }
}
