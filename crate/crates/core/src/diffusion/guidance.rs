use serde::{Deserialize, Serialize};

use super::sampler::predict_x0;
use super::{Denoiser, DiffusionError, DiffusionSchedule};
use crate::extract::{extract_axes_soft, extract_axes_soft_with_vjp, AxisObservation, ExtractError};
use crate::image::{QueryImage, TriAxisImage};

/// Offset keeping the normalized step finite at a perfect match.
const RHO_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// `rho = rho_base / (sqrt(loss) + 1e-6)`.
    Normalized,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Measurement the generated image should reproduce.
    pub target: AxisObservation,
    pub rho: f64,
    pub mode: RhoMode,
    pub sharpness: f64,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(DiffusionError::InvalidConfig(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.sharpness > 0.0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "sharpness must be > 0, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }

    fn active(&self) -> bool {
        self.enabled && self.rho > 0.0
    }
}

/// Squared direction error summed over the three axes plus squared centroid
/// error. The origin does not enter.
pub fn geo_loss(gen: &AxisObservation, gt: &AxisObservation) -> f64 {
    let dirs: f64 = (0..3).map(|i| (gen.dir[i] - gt.dir[i]).norm_squared()).sum();
    dirs + (gen.centroid - gt.centroid).norm_squared()
}

/// Gradient of [`geo_loss`] with respect to `gen`.
pub fn geo_loss_grad(gen: &AxisObservation, gt: &AxisObservation) -> AxisObservation {
    let mut g = AxisObservation::zeros();
    for i in 0..3 {
        g.dir[i] = 2.0 * (gen.dir[i] - gt.dir[i]);
    }
    g.centroid = 2.0 * (gen.centroid - gt.centroid);
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutcome {
    pub eps: Vec<f64>,
    /// Loss at the current clean-image estimate, when guidance ran.
    pub loss: Option<f64>,
    /// Norm of the correction added to the noise estimate.
    pub grad_norm: f64,
    /// Why guidance fell back to the plain estimate at this step.
    pub skipped: Option<ExtractError>,
}

fn clamped_x0(x_t: &TriAxisImage, t: usize, eps: &[f64], sched: &DiffusionSchedule) -> (TriAxisImage, Vec<f64>) {
    let x0 = predict_x0(x_t.data(), t, eps, sched);
    let img = TriAxisImage::from_vec(x_t.width(), x_t.height(), x0.iter().map(|v| v.clamp(0.0, 1.0)).collect());
    (img, x0)
}

/// Guidance loss as a function of the noisy state.
pub fn guidance_loss<D: Denoiser + ?Sized>(
    x_t: &TriAxisImage,
    t: usize,
    denoiser: &D,
    cond: &QueryImage,
    guidance: &GuidanceConfig,
    sched: &DiffusionSchedule,
) -> Result<f64, ExtractError> {
    let eps = denoiser.predict_noise(x_t.data(), t, cond);
    let (img, _) = clamped_x0(x_t, t, &eps, sched);
    let obs = extract_axes_soft(&img, guidance.sharpness)?;
    Ok(geo_loss(&obs, &guidance.target))
}

/// Loss and its gradient in `x_t`, through the clamp, the soft extraction,
/// the clean-image estimate and the denoiser. `eps` must be the denoiser's
/// output at `(x_t, t)`.
pub fn guidance_gradient<D: Denoiser + ?Sized>(
    x_t: &TriAxisImage,
    t: usize,
    eps: &[f64],
    denoiser: &D,
    cond: &QueryImage,
    guidance: &GuidanceConfig,
    sched: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>), ExtractError> {
    let (img, x0) = clamped_x0(x_t, t, eps, sched);
    let target = guidance.target;
    let mut loss = 0.0;
    let (_, g_img) = extract_axes_soft_with_vjp(&img, guidance.sharpness, |obs| {
        loss = geo_loss(obs, &target);
        geo_loss_grad(obs, &target)
    })?;
    // clamp passes the gradient only inside the image range
    let g_x0: Vec<f64> = g_img
        .data()
        .iter()
        .zip(&x0)
        .map(|(g, v)| if (0.0..=1.0).contains(v) { *g } else { 0.0 })
        .collect();
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let through_eps = denoiser.noise_vjp(x_t.data(), t, cond, &g_x0);
    let grad = g_x0
        .iter()
        .zip(&through_eps)
        .map(|(g, j)| (g - sn * j) / sa)
        .collect();
    Ok((loss, grad))
}

/// Noise estimate shifted by the scaled guidance gradient. Disabled or
/// zero-strength guidance returns the denoiser output untouched.
pub fn guided_epsilon<D: Denoiser + ?Sized>(
    x_t: &TriAxisImage,
    t: usize,
    denoiser: &D,
    cond: &QueryImage,
    guidance: Option<&GuidanceConfig>,
    sched: &DiffusionSchedule,
) -> GuidanceOutcome {
    let eps = denoiser.predict_noise(x_t.data(), t, cond);
    let Some(g) = guidance.filter(|g| g.active()) else {
        return GuidanceOutcome {
            eps,
            loss: None,
            grad_norm: 0.0,
            skipped: None,
        };
    };
    match guidance_gradient(x_t, t, &eps, denoiser, cond, g, sched) {
        Ok((loss, grad)) => {
            let rho = match g.mode {
                RhoMode::Constant => g.rho,
                RhoMode::Normalized => g.rho / (loss.sqrt() + RHO_EPS),
            };
            let k = rho * (1.0 - sched.alpha_bar(t)).sqrt();
            let mut norm = 0.0;
            let eps = eps
                .iter()
                .zip(&grad)
                .map(|(e, d)| {
                    let c = k * d;
                    norm += c * c;
                    e + c
                })
                .collect();
            GuidanceOutcome {
                eps,
                loss: Some(loss),
                grad_norm: norm.sqrt(),
                skipped: None,
            }
        }
        Err(e) => GuidanceOutcome {
            eps,
            loss: None,
            grad_norm: 0.0,
            skipped: Some(e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn obs() -> AxisObservation {
        AxisObservation {
            origin_px: Vector2::new(10.0, 12.0),
            dir: [
                Vector2::new(1.0, 0.0),
                Vector2::new(0.0, 1.0),
                Vector2::new(-0.6, -0.8),
            ],
            centroid: Vector2::new(11.0, 13.0),
        }
    }

    #[test]
    fn loss_examples() {
        let gt = obs();
        assert_eq!(geo_loss(&gt, &gt), 0.0);
        let mut gen = gt;
        gen.centroid += Vector2::new(3.0, 4.0);
        assert_eq!(geo_loss(&gen, &gt), 25.0);
        let mut gen = gt;
        gen.dir[0] = Vector2::new(0.0, 1.0);
        let mut gt2 = gt;
        gt2.dir[0] = Vector2::new(1.0, 0.0);
        assert_eq!(geo_loss(&gen, &gt2), 2.0);
        let mut gen = gt;
        gen.origin_px += Vector2::new(5.0, 5.0);
        assert_eq!(geo_loss(&gen, &gt), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let gt = obs();
        let mut gen = gt;
        gen.dir[1] = Vector2::new(0.3, 0.9);
        gen.centroid = Vector2::new(9.0, 14.5);
        let g = geo_loss_grad(&gen, &gt).to_array();
        let base = gen.to_array();
        for j in 0..10 {
            let mut p = base;
            let mut m = base;
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (geo_loss(&AxisObservation::from_array(&p), &gt)
                - geo_loss(&AxisObservation::from_array(&m), &gt))
                / 2e-6;
            assert!((fd - g[j]).abs() < 1e-6, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn invalid_guidance() {
        let mut g = GuidanceConfig {
            target: obs(),
            rho: -1.0,
            mode: RhoMode::Normalized,
            sharpness: 10.0,
            enabled: true,
        };
        assert!(g.validate().is_err());
        g.rho = 1.0;
        g.sharpness = 0.0;
        assert!(g.validate().is_err());
    }
}
