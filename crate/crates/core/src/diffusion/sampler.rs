use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::guidance::{guided_epsilon, GuidanceConfig};
use super::{Denoiser, DiffusionError, DiffusionSchedule};
use crate::image::{QueryImage, TriAxisImage};

/// Draws `eps ~ N(0, I)` and returns `(x_t, eps)`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    x0: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = x0.iter().zip(&eps).map(|(x, e)| sa * x + sn * e).collect();
    (x_t, eps)
}

pub fn predict_x0(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &DiffusionSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - sn * e) / sa)
        .collect()
}

/// One DDIM update from `t` to `t_prev < t` (`t_prev == 0` is the clean end).
/// With `sigma == 0` no random numbers are drawn.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps: &[f64],
    sched: &DiffusionSchedule,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    sched.check_timestep(t)?;
    debug_assert!(t_prev < t);
    let a_prev = sched.alpha_bar(t_prev);
    let limit = (1.0 - a_prev).sqrt();
    if !(sigma >= 0.0) || sigma * sigma > 1.0 - a_prev {
        return Err(DiffusionError::InvalidSigma { sigma, limit });
    }
    let x0 = predict_x0(x_t, t, eps, sched);
    let sa = a_prev.sqrt();
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let mut out: Vec<f64> = x0.iter().zip(eps).map(|(x, e)| sa * x + dir * e).collect();
    if sigma > 0.0 {
        for v in &mut out {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
    }
    Ok(out)
}

/// Descending timesteps with uniform stride `T / steps`, ending at 1.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > total {
        return Err(DiffusionError::InvalidConfig(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    let stride = total / steps;
    Ok((0..steps).rev().map(|i| 1 + i * stride).collect())
}

/// Sampler noise for the step `t -> t_prev` at stochasticity `eta`: 0 is
/// deterministic DDIM, 1 matches the ancestral (DDPM) posterior variance.
/// Always within the bound [`ddim_step`] enforces.
pub fn step_sigma(sched: &DiffusionSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let (a, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    eta * ((1.0 - ap) / (1.0 - a) * (1.0 - a / ap)).max(0.0).sqrt()
}

/// Unguided DDIM chain from a caller-supplied `x_T`.
pub fn sample_chain<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &QueryImage,
    x_start: Vec<f64>,
    sched: &DiffusionSchedule,
    eta: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    let ts = sampling_timesteps(sched.steps(), steps)?;
    let mut x = x_start;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = denoiser.predict_noise(&x, t, cond);
        x = ddim_step(&x, t, t_prev, &eps, sched, step_sigma(sched, t, t_prev, eta), rng)?;
    }
    Ok(x)
}

/// Per-step record of the guided sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub guidance_norm: f64,
    pub loss: Option<f64>,
    pub skipped: bool,
    pub reason: Option<String>,
}

/// Full reverse process from `x_T ~ N(0, I)`, optionally guided, clamped to
/// `[0, 1]` at the end. `eta` scales the per-step noise as in [`step_sigma`].
#[allow(clippy::too_many_arguments)]
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &QueryImage,
    guidance: Option<&GuidanceConfig>,
    sched: &DiffusionSchedule,
    eta: f64,
    steps: usize,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<(TriAxisImage, Vec<StepLog>), DiffusionError> {
    if let Some(g) = guidance {
        g.validate()?;
    }
    let ts = sampling_timesteps(sched.steps(), steps)?;
    let n = width * height * 3;
    let init: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = TriAxisImage::from_vec(width, height, init);
    let mut log = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let out = guided_epsilon(&x, t, denoiser, cond, guidance, sched);
        log.push(StepLog {
            t,
            guidance_norm: out.grad_norm,
            loss: out.loss,
            skipped: out.skipped.is_some(),
            reason: out.skipped.map(|e| e.to_string()),
        });
        let sigma = step_sigma(sched, t, t_prev, eta);
        let next = ddim_step(x.data(), t, t_prev, &out.eps, sched, sigma, rng)?;
        x = TriAxisImage::from_vec(width, height, next);
    }
    Ok((x.clamp01(), log))
}
