//! Pose accuracy metrics and their aggregation into success rates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{project_point, CameraIntrinsics, GeometryError, Pose};

/// Object-frame evaluation points and their diameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoints {
    points: Vec<Vector3<f64>>,
    diameter: f64,
}

impl ModelPoints {
    /// Panics on fewer than 8 points or a zero diameter.
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        assert!(points.len() >= 8, "need at least 8 model points");
        let mut d = 0.0f64;
        for (i, a) in points.iter().enumerate() {
            for b in &points[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        assert!(d > 0.0, "model points are coincident");
        Self {
            points,
            diameter: d,
        }
    }

    /// The 8 corners and 6 face centers of a cube with the given half-extent.
    pub fn cuboid(half_extent: f64) -> Self {
        let h = half_extent;
        let mut pts = Vec::with_capacity(14);
        for &x in &[-h, h] {
            for &y in &[-h, h] {
                for &z in &[-h, h] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        for axis in 0..3 {
            for &s in &[-h, h] {
                let mut c = Vector3::zeros();
                c[axis] = s;
                pts.push(c);
            }
        }
        Self::new(pts)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }
}

/// Mean distance between model points under the two poses.
pub fn add_metric(gt: &Pose, pred: &Pose, model: &ModelPoints) -> f64 {
    let sum: f64 = model
        .points
        .iter()
        .map(|x| (gt.transform(x) - pred.transform(x)).norm())
        .sum();
    sum / model.points.len() as f64
}

/// Mean pixel distance between model points projected under the two poses.
pub fn reproj_metric(
    gt: &Pose,
    pred: &Pose,
    model: &ModelPoints,
    k: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    let mut sum = 0.0;
    for x in &model.points {
        let a = project_point(k, gt, x)?;
        let b = project_point(k, pred, x)?;
        sum += (a - b).norm();
    }
    Ok(sum / model.points.len() as f64)
}

/// Angle of the relative rotation, in degrees.
pub fn rotation_geodesic(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let c = ((r1.transpose() * r2).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// ADD passes below `add_frac * diameter`.
    pub add_frac: f64,
    /// Reprojection passes below this many pixels.
    pub reproj_px: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            add_frac: 0.2,
            reproj_px: 15.0,
        }
    }
}

/// One evaluation input: ground truth and the prediction, or the reason
/// there is none.
#[derive(Debug, Clone)]
pub struct EvalInput {
    pub id: String,
    pub gt: Pose,
    pub pred: Result<Pose, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ok: bool,
    pub error: Option<String>,
    pub rot_deg: Option<f64>,
    pub trans_err: Option<f64>,
    pub add: Option<f64>,
    pub reproj_px: Option<f64>,
    pub add_pass: bool,
    pub reproj_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub n_failed: usize,
    pub add_rate: f64,
    pub reproj_rate: f64,
    pub median_rot_deg: Option<f64>,
    pub median_trans_err: Option<f64>,
    pub median_add: Option<f64>,
    pub median_reproj_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<SampleMetrics>,
    pub summary: Summary,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

impl Summary {
    /// Aggregates are a pure function of the per-sample records.
    pub fn from_records(records: &[SampleMetrics]) -> Self {
        let n = records.len();
        let rate = |f: fn(&SampleMetrics) -> bool| {
            if n == 0 {
                0.0
            } else {
                records.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        let collect = |f: fn(&SampleMetrics) -> Option<f64>| {
            let mut v: Vec<f64> = records.iter().filter_map(f).collect();
            median(&mut v)
        };
        Self {
            n,
            n_failed: records.iter().filter(|r| !r.ok).count(),
            add_rate: rate(|r| r.add_pass),
            reproj_rate: rate(|r| r.reproj_pass),
            median_rot_deg: collect(|r| r.rot_deg),
            median_trans_err: collect(|r| r.trans_err),
            median_add: collect(|r| r.add),
            median_reproj_px: collect(|r| r.reproj_px),
        }
    }
}

pub fn evaluate_sample(
    input: &EvalInput,
    model: &ModelPoints,
    k: &CameraIntrinsics,
    th: &Thresholds,
) -> SampleMetrics {
    let pred = match &input.pred {
        Ok(p) => p,
        Err(e) => {
            return SampleMetrics {
                id: input.id.clone(),
                ok: false,
                error: Some(e.clone()),
                rot_deg: None,
                trans_err: None,
                add: None,
                reproj_px: None,
                add_pass: false,
                reproj_pass: false,
            }
        }
    };
    let gt = &input.gt;
    let add = add_metric(gt, pred, model);
    let reproj = reproj_metric(gt, pred, model, k).ok();
    SampleMetrics {
        id: input.id.clone(),
        ok: true,
        error: None,
        rot_deg: Some(rotation_geodesic(&gt.rotation, &pred.rotation)),
        trans_err: Some((gt.translation - pred.translation).norm()),
        add: Some(add),
        reproj_px: reproj,
        add_pass: add < th.add_frac * model.diameter(),
        reproj_pass: reproj.is_some_and(|r| r < th.reproj_px),
    }
}

/// Per-sample metrics in input order plus aggregate rates.
pub fn evaluate_suite(
    inputs: &[EvalInput],
    model: &ModelPoints,
    k: &CameraIntrinsics,
    th: &Thresholds,
) -> MetricsReport {
    let records: Vec<SampleMetrics> = inputs
        .iter()
        .map(|i| evaluate_sample(i, model, k, th))
        .collect();
    let summary = Summary::from_records(&records);
    MetricsReport { records, summary }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{rot_x, rot_y, rot_z};

    fn base() -> Pose {
        Pose::new(rot_x(25.0) * rot_y(-10.0), Vector3::new(0.1, -0.2, 6.0))
    }

    fn k128() -> CameraIntrinsics {
        CameraIntrinsics::simple(100.0, 64.0, 64.0, 128).unwrap()
    }

    #[test]
    fn cuboid_diameter() {
        let m = ModelPoints::cuboid(1.0);
        assert_eq!(m.points().len(), 14);
        assert!((m.diameter() - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn add_of_identical_and_shifted_poses() {
        let m = ModelPoints::cuboid(1.0);
        assert_eq!(add_metric(&base(), &base(), &m), 0.0);
        let mut shifted = base();
        shifted.translation.x += 0.1;
        assert!((add_metric(&base(), &shifted, &m) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn add_threshold_is_strict() {
        // 3x4 rectangle: diameter 5, so the ADD threshold is exactly 1
        let mut pts = Vec::new();
        for &(x, y) in &[(-1.5, -2.0), (1.5, -2.0), (1.5, 2.0), (-1.5, 2.0)] {
            pts.push(Vector3::new(x, y, 0.0));
            pts.push(Vector3::new(x, 0.0, 0.0));
        }
        let m = ModelPoints::new(pts);
        let th = Thresholds::default();
        assert_eq!(th.add_frac * m.diameter(), 1.0);
        let mut shifted = base();
        shifted.translation.x += 1.0;
        let input = EvalInput {
            id: "a".into(),
            gt: base(),
            pred: Ok(shifted),
        };
        let s = evaluate_sample(&input, &m, &k128(), &th);
        assert!((s.add.unwrap() - 1.0).abs() < 1e-12);
        let exact = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 6.0));
        let mut moved = exact;
        moved.translation.x = 1.0;
        assert_eq!(add_metric(&exact, &moved, &m), 1.0);
        let s = evaluate_sample(
            &EvalInput {
                id: "b".into(),
                gt: exact,
                pred: Ok(moved),
            },
            &m,
            &k128(),
            &th,
        );
        assert!(!s.add_pass);
    }

    #[test]
    fn fronto_parallel_shift_reprojects_by_similar_triangles() {
        let pts: Vec<Vector3<f64>> = (0..9)
            .map(|i| Vector3::new((i % 3) as f64 - 1.0, (i / 3) as f64 - 1.0, 0.0))
            .collect();
        let m = ModelPoints::new(pts);
        let gt = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 4.0));
        let mut pred = gt;
        pred.translation.x += 0.2;
        let e = reproj_metric(&gt, &pred, &m, &k128()).unwrap();
        assert!((e - 100.0 * 0.2 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_examples() {
        let r = rot_x(33.0) * rot_y(12.0);
        assert!(rotation_geodesic(&r, &r).abs() < 1e-6);
        assert!((rotation_geodesic(&r, &(r * rot_z(30.0))) - 30.0).abs() < 1e-9);
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!((rotation_geodesic(&r, &(r * flip)) - 180.0).abs() < 1e-6);
    }

    #[test]
    fn suite_rates() {
        let m = ModelPoints::cuboid(1.0);
        let k = k128();
        let th = Thresholds::default();
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let inputs: Vec<EvalInput> = (0..10)
            .map(|i| {
                let gt = base();
                let pred = if i % 2 == 0 {
                    gt
                } else {
                    Pose::new(gt.rotation * flip, gt.translation)
                };
                EvalInput {
                    id: format!("{i}"),
                    gt,
                    pred: Ok(pred),
                }
            })
            .collect();
        let rep = evaluate_suite(&inputs, &m, &k, &th);
        assert_eq!(rep.summary.add_rate, 0.5);
        assert_eq!(rep.summary.n, 10);
        assert_eq!(Summary::from_records(&rep.records), rep.summary);

        let perfect: Vec<EvalInput> = (0..4)
            .map(|i| EvalInput {
                id: format!("{i}"),
                gt: base(),
                pred: Ok(base()),
            })
            .collect();
        let rep = evaluate_suite(&perfect, &m, &k, &th);
        assert_eq!(rep.summary.add_rate, 1.0);
        assert_eq!(rep.summary.reproj_rate, 1.0);
    }

    #[test]
    fn failed_predictions_count_as_misses() {
        let m = ModelPoints::cuboid(1.0);
        let inputs = vec![
            EvalInput {
                id: "ok".into(),
                gt: base(),
                pred: Ok(base()),
            },
            EvalInput {
                id: "bad".into(),
                gt: base(),
                pred: Err("NoValidSolution".into()),
            },
        ];
        let rep = evaluate_suite(&inputs, &m, &k128(), &Thresholds::default());
        assert_eq!(rep.summary.reproj_rate, 0.5);
        assert_eq!(rep.summary.n_failed, 1);
        assert_eq!(rep.records[1].error.as_deref(), Some("NoValidSolution"));
        assert_eq!(rep.summary.median_rot_deg, Some(0.0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
