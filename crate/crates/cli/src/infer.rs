//! `infer`: sample a tri-axis image per record, extract axes, recover pose.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use axisforge::diffusion::mlp::MlpDenoiser;
use axisforge::diffusion::{
    geo_loss, sample, Denoiser, DiffusionSchedule, GaussianDenoiser, GaussianScoreField,
    GuidanceConfig, StepLog,
};
use axisforge::extract::{extract_axes_hard, extract_axes_soft};
use axisforge::tbm::recover_pose;
use axisforge::{LegRatios, TriAxisImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DenoiserKind, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{Dataset, DatasetRecord, PoseRecord, Split};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const GENERATED_DIR: &str = "generated";
pub const LOG_DIR: &str = "logs";

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub split: Split,
    pub guidance_on: bool,
    /// Per-record sampling logs under `logs/`.
    pub write_logs: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            guidance_on: true,
            write_logs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub ok: bool,
    pub pose: Option<PoseRecord>,
    /// Name of the error variant that stopped this record.
    pub error_kind: Option<String>,
    pub error: Option<String>,
    /// Geometric loss of the generated image against the ground-truth
    /// measurement, both soft-extracted at the guidance sharpness.
    pub geo_loss: Option<f64>,
    pub guided_steps: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRun {
    pub split: Split,
    pub guidance_on: bool,
    pub denoiser: DenoiserKind,
    pub seed: u64,
    pub n: usize,
    pub n_failed: usize,
    pub failures: BTreeMap<String, usize>,
}

/// Per-record seed: FNV-1a of the id folded into the global seed, then
/// finalized with splitmix64.
pub fn record_seed(global: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

enum Model {
    Mlp(MlpDenoiser),
    Analytic(f64),
}

fn failure(id: &str, kind: &str, msg: String) -> Prediction {
    Prediction {
        id: id.to_string(),
        ok: false,
        pose: None,
        error_kind: Some(kind.to_string()),
        error: Some(msg),
        geo_loss: None,
        guided_steps: 0,
        skipped_steps: 0,
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    model: &'a Model,
    sched: &'a DiffusionSchedule,
    opts: &'a InferOptions,
    out_dir: &'a Path,
}

fn infer_record(ctx: &Ctx, rec: &DatasetRecord) -> Result<Prediction> {
    let cfg = ctx.cfg;
    let gt_img = ctx.ds.triaxis(rec)?;
    let cond = ctx.ds.degraded(rec)?;
    let (w, h) = (gt_img.width(), gt_img.height());

    let analytic;
    let den: &dyn Denoiser = match ctx.model {
        Model::Mlp(m) => m,
        Model::Analytic(var) => {
            let field = GaussianScoreField::isotropic(gt_img.data().to_vec(), *var);
            analytic = GaussianDenoiser::new(field, ctx.sched);
            &analytic
        }
    };

    let target = extract_axes_soft(&gt_img, cfg.guidance.sharpness).ok();
    let guidance = match (ctx.opts.guidance_on, target) {
        (true, Some(target)) => Some(GuidanceConfig {
            target,
            rho: cfg.guidance.rho_base,
            mode: cfg.guidance.mode,
            sharpness: cfg.guidance.sharpness,
            enabled: cfg.guidance.enabled,
        }),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(cfg.seed, &rec.id));
    let (img, log) = match sample(
        den,
        &cond,
        guidance.as_ref(),
        ctx.sched,
        cfg.sampling.eta,
        cfg.sampling.steps,
        w,
        h,
        &mut rng,
    ) {
        Ok(v) => v,
        Err(e) => return Ok(failure(&rec.id, e.kind(), e.to_string())),
    };
    write_outputs(ctx, &rec.id, &img, &log)?;

    let guided_steps = log.iter().filter(|s| s.loss.is_some() && !s.skipped).count();
    let skipped_steps = log.iter().filter(|s| s.skipped).count();
    let geo = target.and_then(|t| {
        extract_axes_soft(&img, cfg.guidance.sharpness)
            .ok()
            .map(|g| geo_loss(&g, &t))
    });
    let with_stats = |mut p: Prediction| {
        p.geo_loss = geo;
        p.guided_steps = guided_steps;
        p.skipped_steps = skipped_steps;
        p
    };

    let obs = match extract_axes_hard(&img) {
        Ok(o) => o,
        Err(e) => return Ok(with_stats(failure(&rec.id, e.kind(), e.to_string()))),
    };
    let gt = rec.pose();
    match recover_pose(&obs, &rec.intrinsics, &LegRatios::default(), gt.translation.z) {
        Ok(pose) => Ok(with_stats(Prediction {
            id: rec.id.clone(),
            ok: true,
            pose: Some(PoseRecord::from(&pose)),
            error_kind: None,
            error: None,
            geo_loss: None,
            guided_steps: 0,
            skipped_steps: 0,
        })),
        Err(e) => Ok(with_stats(failure(&rec.id, e.kind(), e.to_string()))),
    }
}

fn write_outputs(ctx: &Ctx, id: &str, img: &TriAxisImage, log: &[StepLog]) -> Result<()> {
    let path = ctx.out_dir.join(GENERATED_DIR).join(format!("{id}.f32"));
    img.write_f32(&path).map_err(CliError::io(&path))?;
    if ctx.opts.write_logs {
        let path = ctx.out_dir.join(LOG_DIR).join(format!("{id}.jsonl"));
        let mut text = String::new();
        for s in log {
            text.push_str(&serde_json::to_string(s).map_err(CliError::json(&path))?);
            text.push('\n');
        }
        fs::write(&path, text).map_err(CliError::io(&path))?;
    }
    Ok(())
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    out_dir: &Path,
    opts: &InferOptions,
) -> Result<InferRun> {
    cfg.validate()?;
    let ds = Dataset::open(dataset_dir)?;
    let records: Vec<&DatasetRecord> = ds.manifest.split(opts.split).collect();

    let (model, sched) = match cfg.infer.denoiser {
        DenoiserKind::Mlp => {
            let path = checkpoint
                .ok_or_else(|| CliError::Usage("the mlp denoiser needs --checkpoint".into()))?;
            let (m, params) = MlpDenoiser::load(path).map_err(CliError::io(path))?;
            if let Some(r) = records.first() {
                let a = m.arch();
                if a.width != r.intrinsics.width as usize || a.height != r.intrinsics.height as usize {
                    return Err(CliError::Config(format!(
                        "checkpoint expects {}x{} images, dataset has {}x{}",
                        a.width, a.height, r.intrinsics.width, r.intrinsics.height
                    )));
                }
            }
            if cfg.sampling.steps > params.steps {
                return Err(CliError::Config(format!(
                    "sampling steps {} exceed the checkpoint schedule length {}",
                    cfg.sampling.steps, params.steps
                )));
            }
            (Model::Mlp(m), DiffusionSchedule::from_params(&params)?)
        }
        DenoiserKind::Analytic => (
            Model::Analytic(cfg.infer.analytic_var),
            DiffusionSchedule::from_params(&cfg.schedule)?,
        ),
    };

    for sub in [GENERATED_DIR, LOG_DIR] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    }
    let ctx = Ctx {
        cfg,
        ds: &ds,
        model: &model,
        sched: &sched,
        opts,
        out_dir,
    };
    let preds: Vec<Prediction> = records
        .par_iter()
        .map(|r| infer_record(&ctx, r))
        .collect::<Result<_>>()?;

    let path = out_dir.join(PREDICTIONS_FILE);
    write_jsonl(&path, &preds)?;

    let mut failures = BTreeMap::new();
    for p in preds.iter().filter(|p| !p.ok) {
        let kind = p.error_kind.clone().unwrap_or_default();
        *failures.entry(kind).or_insert(0) += 1;
    }
    let run = InferRun {
        split: opts.split,
        guidance_on: opts.guidance_on,
        denoiser: cfg.infer.denoiser,
        seed: cfg.seed,
        n: preds.len(),
        n_failed: preds.iter().filter(|p| !p.ok).count(),
        failures,
    };
    let path = out_dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&run).map_err(CliError::json(&path))?;
    fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
    Ok(run)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(CliError::json(path))?;
        buf.write_all(b"\n").map_err(CliError::io(path))?;
    }
    fs::write(path, buf).map_err(CliError::io(path))
}

pub fn read_predictions(dir: &Path) -> Result<Vec<Prediction>> {
    let path: PathBuf = dir.join(PREDICTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::json(&path)))
        .collect()
}

pub fn read_run(dir: &Path) -> Result<InferRun> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    serde_json::from_str(&text).map_err(CliError::json(&path))
}
