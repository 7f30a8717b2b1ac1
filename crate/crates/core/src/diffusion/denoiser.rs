use crate::image::QueryImage;

use super::DiffusionSchedule;

/// Noise predictor `eps(x_t, t | cond)` together with its input adjoint.
pub trait Denoiser: Sync {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &QueryImage) -> Vec<f64>;

    /// `J^T cotangent` where `J` is the Jacobian of `predict_noise` in `x_t`.
    fn noise_vjp(&self, x_t: &[f64], t: usize, cond: &QueryImage, cotangent: &[f64]) -> Vec<f64>;
}

/// Independent per-element Gaussian data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScoreField {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianScoreField {
    /// Panics on mismatched lengths or a non-positive variance.
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), var.len(), "mean/variance length mismatch");
        assert!(var.iter().all(|&v| v > 0.0), "variances must be positive");
        Self { mean, var }
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let n = mean.len();
        Self::new(mean, vec![var; n])
    }

    /// Gradient of the log density of the diffused marginal at step `t`.
    pub fn score(&self, x_t: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        x_t.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| -(x - sa * m) / (alpha_bar * v + 1.0 - alpha_bar))
            .collect()
    }
}

/// Exact noise predictor for a [`GaussianScoreField`].
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub field: GaussianScoreField,
    sched: DiffusionSchedule,
}

impl GaussianDenoiser {
    pub fn new(field: GaussianScoreField, sched: &DiffusionSchedule) -> Self {
        Self {
            field,
            sched: sched.clone(),
        }
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(&self, x_t: &[f64], t: usize, _cond: &QueryImage) -> Vec<f64> {
        let a = self.sched.alpha_bar(t);
        let s = (1.0 - a).sqrt();
        self.field.score(x_t, a).into_iter().map(|g| -s * g).collect()
    }

    fn noise_vjp(&self, _x_t: &[f64], t: usize, _cond: &QueryImage, cotangent: &[f64]) -> Vec<f64> {
        let a = self.sched.alpha_bar(t);
        let s = (1.0 - a).sqrt();
        cotangent
            .iter()
            .zip(&self.field.var)
            .map(|(c, v)| c * s / (a * v + 1.0 - a))
            .collect()
    }
}
