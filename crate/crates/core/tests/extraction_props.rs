use axisforge::camera::{project_axes, CameraIntrinsics, Pose};
use axisforge::extract::{
    extract_axes_hard, extract_axes_soft, soft_extract_vjp, AxisObservation, DEFAULT_SHARPNESS,
};
use axisforge::render::{apply_degradation, render_query, render_triaxis, DegradationSpec};
use axisforge::scene::PoseSampler;
use axisforge::image::TriAxisImage;
use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn angle_deg(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

fn poses(seed: u64, n: usize) -> (CameraIntrinsics, Vec<Pose>) {
    let k = CameraIntrinsics::reference();
    let s = PoseSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..n).map(|_| s.sample(&k, &mut rng).unwrap()).collect();
    (k, v)
}

fn render(k: &CameraIntrinsics, pose: &Pose) -> TriAxisImage {
    render_triaxis(k, pose, 1.0, 2.0).unwrap()
}

#[test]
fn raster_extraction_tracks_projection() {
    let (k, poses) = poses(11, 500);
    let mut errs = Vec::new();
    for pose in &poses {
        let lines = project_axes(&k, pose, 1.0).unwrap();
        match extract_axes_hard(&render(&k, pose)) {
            Ok(obs) => errs.extend((0..3).map(|i| angle_deg(&obs.dir[i], &lines.dir[i]))),
            Err(_) => errs.extend([180.0; 3]),
        }
    }
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    assert!(median < 2.0, "median direction error {median}");
}

#[test]
fn hard_and_soft_agree_on_clean_renders() {
    let (k, poses) = poses(12, 200);
    let mut checked = 0;
    for pose in &poses {
        let img = render(&k, pose);
        let Ok(hard) = extract_axes_hard(&img) else { continue };
        let soft = extract_axes_soft(&img, DEFAULT_SHARPNESS).unwrap();
        for i in 0..3 {
            assert!(angle_deg(&hard.dir[i], &soft.dir[i]) < 0.5);
        }
        assert!((hard.origin_px - soft.origin_px).norm() < 0.5);
        checked += 1;
    }
    assert!(checked >= 190, "only {checked} renders extracted");
}

#[test]
fn rotating_the_image_rotates_directions() {
    let (k, poses) = poses(13, 50);
    for pose in &poses {
        let img = render(&k, pose);
        let Ok(a) = extract_axes_hard(&img) else { continue };
        let b = extract_axes_hard(&img.rotate90()).unwrap();
        for i in 0..3 {
            let rotated = Vector2::new(-a.dir[i].y, a.dir[i].x);
            assert!(angle_deg(&rotated, &b.dir[i]) < 1.0);
        }
    }
}

#[test]
fn renders_stay_in_range() {
    let (k, poses) = poses(14, 20);
    for (i, pose) in poses.iter().enumerate() {
        let tri = render(&k, pose);
        let q = render_query(&k, pose, 0.5).unwrap();
        assert!(tri.data().iter().chain(q.data()).all(|v| (0.0..=1.0).contains(v)));
        let spec = DegradationSpec {
            occlusion_frac: 0.25,
            noise_sigma: 0.1,
            blur_radius: 1,
            seed: i as u64,
        };
        let d = apply_degradation(&q, &spec).unwrap();
        assert_eq!((d.width(), d.height(), d.len()), (q.width(), q.height(), q.len()));
        assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn random_obs(rng: &mut ChaCha8Rng) -> AxisObservation {
    let mut a = [0.0; 10];
    for v in &mut a {
        *v = rng.random_range(-1.0..1.0);
    }
    AxisObservation::from_array(&a)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn vjp_is_linear_in_the_cotangent(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let (k, poses) = poses(seed, 1);
        let img = render(&k, &poses[0]);
        prop_assume!(extract_axes_soft(&img, 20.0).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (c1, c2) = (random_obs(&mut rng), random_obs(&mut rng));
        let mix = AxisObservation::from_array(&std::array::from_fn(|j| {
            a * c1.to_array()[j] + b * c2.to_array()[j]
        }));
        let g = soft_extract_vjp(&img, 20.0, &mix).unwrap();
        let g1 = soft_extract_vjp(&img, 20.0, &c1).unwrap();
        let g2 = soft_extract_vjp(&img, 20.0, &c2).unwrap();
        let scale = g1.data().iter().chain(g2.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        for ((x, y), z) in g.data().iter().zip(g1.data()).zip(g2.data()) {
            prop_assert!((x - (a * y + b * z)).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn soft_outputs_are_unit_directions_inside_the_image(seed in any::<u64>()) {
        let (k, poses) = poses(seed, 1);
        let img = render(&k, &poses[0]);
        if let Ok(obs) = extract_axes_soft(&img, DEFAULT_SHARPNESS) {
            for d in &obs.dir {
                prop_assert!((d.norm() - 1.0).abs() < 1e-9);
            }
            for p in [obs.origin_px, obs.centroid] {
                prop_assert!(p.x >= 0.0 && p.y >= 0.0 && p.x < 128.0 && p.y < 128.0);
            }
        }
    }
}
