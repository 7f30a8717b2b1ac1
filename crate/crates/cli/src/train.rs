//! `train`: fits the conditional denoiser on the dataset's training split.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use axisforge::diffusion::mlp::{AdamState, LossRecord, MlpDenoiser, PixelPrior, TrainSample, Trainer};
use axisforge::diffusion::DiffusionSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Dataset, Split};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint and its optimizer sidecar if present.
    pub resume: bool,
    /// Train on only the first `n` training records.
    pub limit: Option<usize>,
    /// Write checkpoint and sidecar every this many steps; 0 saves only at
    /// the end.
    pub save_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub start_step: usize,
    pub end_step: usize,
    pub n_samples: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_avg: Option<f64>,
}

pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".opt")
}

pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".loss.jsonl")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn load_training_set(ds: &Dataset, limit: Option<usize>) -> Result<Vec<TrainSample>> {
    let recs: Vec<_> = ds.manifest.split(Split::Train).collect();
    let n = limit.map_or(recs.len(), |l| l.min(recs.len()));
    recs[..n]
        .iter()
        .map(|r| {
            Ok(TrainSample {
                x0: ds.triaxis(r)?,
                cond: ds.degraded(r)?,
            })
        })
        .collect()
}

fn save(trainer: &Trainer, checkpoint: &Path, cfg: &RunConfig) -> Result<()> {
    trainer
        .model
        .save(checkpoint, &cfg.schedule)
        .map_err(CliError::io(checkpoint))?;
    let opt = optimizer_path(checkpoint);
    trainer.state.save(&opt).map_err(CliError::io(&opt))
}

pub fn cmd_train(cfg: &RunConfig, dataset_dir: &Path, checkpoint: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    cfg.check_arch_matches_render()?;
    let ds = Dataset::open(dataset_dir)?;
    let data = load_training_set(&ds, opts.limit)?;
    if data.is_empty() {
        return Err(CliError::Manifest("dataset has no training records".into()));
    }
    let sched = DiffusionSchedule::from_params(&cfg.schedule)?;
    let trainer_seed = cfg.seed.wrapping_add(1);

    let log_path = loss_log_path(checkpoint);
    let resuming = opts.resume && checkpoint.exists();
    let mut trainer = if resuming {
        let (model, saved_sched) = MlpDenoiser::load(checkpoint).map_err(CliError::io(checkpoint))?;
        if *model.arch() != cfg.arch {
            return Err(CliError::Config(format!(
                "checkpoint architecture {:?} differs from config {:?}",
                model.arch(),
                cfg.arch
            )));
        }
        if saved_sched != cfg.schedule {
            return Err(CliError::Config("checkpoint schedule differs from config".into()));
        }
        let opt_path = optimizer_path(checkpoint);
        let state = AdamState::load(&opt_path).map_err(CliError::io(&opt_path))?;
        Trainer::resume(model, state, cfg.opt.clone(), trainer_seed)?
    } else {
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = MlpDenoiser::new(cfg.arch, &mut init)?;
        if let Some(floor) = cfg.opt.prior_var_floor {
            model = model.with_prior(PixelPrior::fit(data.iter().map(|s| &s.x0), floor)?, &sched)?;
            model.zero_output_layer();
        }
        if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        fs::write(&log_path, b"").map_err(CliError::io(&log_path))?;
        Trainer::new(model, cfg.opt.clone(), trainer_seed)?
    };

    let start_step = trainer.state.step;
    let remaining = cfg.opt.steps.saturating_sub(start_step);
    let file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(CliError::io(&log_path))?;
    let mut log = BufWriter::new(file);
    let mut last: Option<LossRecord> = None;
    let mut write_err: Option<std::io::Error> = None;

    let chunk = if opts.save_every == 0 { remaining.max(1) } else { opts.save_every };
    let mut done = 0;
    while done < remaining {
        let n = chunk.min(remaining - done);
        trainer.run(&data, &sched, n, |rec| {
            if write_err.is_none() {
                let line = serde_json::to_string(rec).expect("loss record serializes");
                if let Err(e) = writeln!(log, "{line}") {
                    write_err = Some(e);
                }
            }
            last = Some(*rec);
        })?;
        if let Some(e) = write_err.take() {
            return Err(CliError::Io { path: log_path, source: e });
        }
        done += n;
        save(&trainer, checkpoint, cfg)?;
    }
    if remaining == 0 {
        save(&trainer, checkpoint, cfg)?;
    }
    log.flush().map_err(CliError::io(&log_path))?;

    Ok(TrainReport {
        start_step,
        end_step: trainer.state.step,
        n_samples: data.len(),
        initial_loss: trainer.state.initial_loss,
        final_loss: last.map(|r| r.loss),
        final_avg: last.map(|r| r.avg),
    })
}

/// Reads a loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::json(path)))
        .collect()
}
