//! Run configuration, read from the same JSON dialect as the manifest.

use std::fs;
use std::path::Path;

use axisforge::diffusion::mlp::{ArchConfig, OptConfig};
use axisforge::diffusion::{DiffusionSchedule, RhoMode, ScheduleParams};
use axisforge::metrics::Thresholds;
use axisforge::render::DegradationSpec;
use axisforge::scene::PoseSampler;
use axisforge::CameraIntrinsics;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub render: RenderConfig,
    pub schedule: ScheduleParams,
    pub arch: ArchConfig,
    pub opt: OptConfig,
    pub sampling: SamplingConfig,
    pub guidance: GuidanceParams,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub thickness_px: f64,
    pub scene: PoseSampler,
    pub train_degradation: Degradation,
    pub test_degradation: Degradation,
}

/// Degradation parameters without the seed; each record draws its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Degradation {
    pub occlusion_frac: f64,
    pub noise_sigma: f64,
    pub blur_radius: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    /// 0 is the deterministic sampler, 1 matches ancestral noise levels.
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceParams {
    pub enabled: bool,
    pub rho_base: f64,
    pub mode: RhoMode,
    pub sharpness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    /// Trained network from a checkpoint.
    Mlp,
    /// Exact Gaussian denoiser centred on each record's ground-truth
    /// tri-axis image.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub denoiser: DenoiserKind,
    pub analytic_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Thresholds,
    /// Pixel metrics are measured in this camera, the dataset camera resized.
    pub reference_width: u32,
    pub reference_height: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            render: RenderConfig::default(),
            schedule: ScheduleParams::default(),
            arch: ArchConfig {
                width: 32,
                height: 32,
                hidden: 512,
            },
            opt: OptConfig::default(),
            sampling: SamplingConfig::default(),
            guidance: GuidanceParams::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            thickness_px: 1.5,
            scene: PoseSampler::default(),
            train_degradation: Degradation::default(),
            test_degradation: Degradation {
                occlusion_frac: 0.25,
                ..Degradation::default()
            },
        }
    }
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            occlusion_frac: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }
}

impl Degradation {
    pub fn with_seed(&self, seed: u64) -> DegradationSpec {
        DegradationSpec {
            occlusion_frac: self.occlusion_frac,
            noise_sigma: self.noise_sigma,
            blur_radius: self.blur_radius,
            seed,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0 }
    }
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            enabled: true,
            rho_base: 1.0,
            mode: RhoMode::Normalized,
            sharpness: 30.0,
        }
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserKind::Mlp,
            analytic_var: 1e-4,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            reference_width: 128,
            reference_height: 128,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(CliError::json(path))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(CliError::json(path))?;
        fs::write(path, text + "\n").map_err(CliError::io(path))
    }

    /// Camera of the rendered dataset: the reference camera resized.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::reference().resized(self.render.width, self.render.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let r = &self.render;
        if r.width < 8 || r.height < 8 {
            return bad(format!("render size {}x{} is below 8x8", r.width, r.height));
        }
        if !(r.thickness_px > 0.0) {
            return bad(format!("thickness_px must be > 0, got {}", r.thickness_px));
        }
        let s = &r.scene;
        if !(s.depth_min > 0.0 && s.depth_max >= s.depth_min) {
            return bad(format!("depth band [{}, {}] is invalid", s.depth_min, s.depth_max));
        }
        if !(s.axis_len > 0.0 && s.half_extent > 0.0) {
            return bad("axis_len and half_extent must be positive".into());
        }
        for d in [&r.train_degradation, &r.test_degradation] {
            d.with_seed(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        DiffusionSchedule::from_params(&self.schedule).map_err(|e| CliError::Config(e.to_string()))?;
        self.arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.opt.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sampling.steps == 0 || self.sampling.steps > self.schedule.steps {
            return bad(format!(
                "sampling steps {} must be in 1..={}",
                self.sampling.steps, self.schedule.steps
            ));
        }
        if !(0.0..=1.0).contains(&self.sampling.eta) {
            return bad(format!("eta must be in [0, 1], got {}", self.sampling.eta));
        }
        let g = &self.guidance;
        if !(g.rho_base >= 0.0 && g.rho_base.is_finite()) || !(g.sharpness > 0.0) {
            return bad(format!("invalid guidance params: {g:?}"));
        }
        if !(self.infer.analytic_var > 0.0) {
            return bad("analytic_var must be > 0".into());
        }
        let e = &self.eval;
        if !(e.thresholds.add_frac > 0.0 && e.thresholds.reproj_px > 0.0) {
            return bad("eval thresholds must be positive".into());
        }
        if e.reference_width == 0 || e.reference_height == 0 {
            return bad("reference camera size must be nonzero".into());
        }
        Ok(())
    }

    /// The model must consume images at the rendered resolution.
    pub fn check_arch_matches_render(&self) -> Result<()> {
        if self.arch.width != self.render.width as usize || self.arch.height != self.render.height as usize {
            return Err(CliError::Config(format!(
                "arch {}x{} does not match render {}x{}",
                self.arch.width, self.arch.height, self.render.width, self.render.height
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
        RunConfig::default().check_arch_matches_render().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.guidance.mode = RhoMode::Constant;
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "sampling": {"steps": 20}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sampling.steps, 20);
        assert_eq!(cfg.sampling.eta, 0.0);
        assert_eq!(cfg.render, RenderConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        let mut cfg = RunConfig::default();
        cfg.sampling.steps = 5000;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.schema_version = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.render.test_degradation.occlusion_frac = 1.5;
        assert!(cfg.validate().is_err());
    }
}
