//! Denoising diffusion: noise schedule, DDIM sampling, geometric guidance and
//! a small conditional MLP denoiser.

mod denoiser;
mod guidance;
pub mod mlp;
mod sampler;
mod schedule;

pub use denoiser::{Denoiser, GaussianDenoiser, GaussianScoreField};
pub use guidance::{
    geo_loss, geo_loss_grad, guidance_gradient, guidance_loss, guided_epsilon, GuidanceConfig,
    GuidanceOutcome, RhoMode,
};
pub use sampler::{
    ddim_step, forward_diffuse, predict_x0, sample, sample_chain, sampling_timesteps, step_sigma,
    StepLog,
};
pub use schedule::{DiffusionSchedule, ScheduleParams};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("sampler sigma {sigma} exceeds sqrt(1 - alpha_bar) = {limit}")]
    InvalidSigma { sigma: f64, limit: f64 },
    #[error("training loss diverged at step {step}: running average {avg} vs initial {initial}")]
    DivergedLoss { step: usize, avg: f64, initial: f64 },
    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl DiffusionError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidSchedule(_) => "InvalidSchedule",
            Self::InvalidSigma { .. } => "InvalidSigma",
            Self::DivergedLoss { .. } => "DivergedLoss",
            Self::InvalidTimestep { .. } => "InvalidTimestep",
            Self::InvalidConfig(_) => "InvalidConfig",
        }
    }
}
