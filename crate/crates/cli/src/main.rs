use std::path::{Path, PathBuf};
use std::process::ExitCode;

use axisforge_cli::config::DenoiserKind;
use axisforge_cli::dataset::cmd_render_dataset;
use axisforge_cli::eval::cmd_eval;
use axisforge_cli::infer::{cmd_infer, InferOptions};
use axisforge_cli::manifest::Split;
use axisforge_cli::oracle::{run_oracles, OracleOptions};
use axisforge_cli::train::{cmd_train, TrainOptions};
use axisforge_cli::{CliError, Result, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EVAL_HELP: &str = "\
Scores predictions against the dataset ground truth.

Writes records.jsonl (one metrics record per dataset record), report.json and
summary.csv. summary.csv has a header row and one data row, columns in this
order:

  n, n_failed, n_missing, add_rate, reproj_rate, median_rot_deg,
  median_trans_err, median_add, median_reproj_px, median_geo_loss

Rates count failed and missing predictions as misses. Medians cover
successful predictions only and are empty when there are none.";

#[derive(Parser)]
#[command(name = "axisforge", version, about = "Tri-axis pose pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded synthetic dataset.
    RenderDataset {
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_test: usize,
    },
    /// Train the conditional denoiser.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path; defaults to OUT/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from an existing checkpoint and optimizer sidecar.
        #[arg(long)]
        resume: bool,
        /// Train on the first N training records only.
        #[arg(long, value_name = "N")]
        overfit: Option<usize>,
        /// Overrides opt.steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        save_every: usize,
    },
    /// Sample tri-axis images and recover poses.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "on")]
        guidance: Toggle,
        /// Overrides infer.denoiser.
        #[arg(long, value_enum)]
        denoiser: Option<DenoiserArg>,
        /// Skip the per-record sampling logs.
        #[arg(long)]
        no_logs: bool,
    },
    #[command(about = "Score predictions against the dataset ground truth", long_about = EVAL_HELP)]
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// A second predictions directory; adds a paired delta to the report.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the numeric oracle suite; exits 3 if any oracle fails.
    Oracle {
        /// Include the oracles that train a model.
        #[arg(long)]
        full: bool,
        /// Break the conic's symmetry by this relative amount (canary).
        #[arg(long, value_name = "EPS")]
        perturb_omega: Option<f64>,
        /// Only run oracles whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Print the effective configuration as JSON.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenoiserArg {
    Mlp,
    Analytic,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads(deterministic: bool) -> Result<()> {
    let n = if deterministic {
        Some(1)
    } else {
        match std::env::var("AXISFORGE_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Usage(format!("AXISFORGE_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        }
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn need_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.common.deterministic)?;
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Command::RenderDataset { n_train, n_test } => {
            let out = need_out(&cli.common)?;
            let m = cmd_render_dataset(&cfg, n_train, n_test, out)?;
            println!("wrote {} records to {}", m.records.len(), out.display());
        }
        Command::Train {
            dataset,
            checkpoint,
            resume,
            overfit,
            steps,
            save_every,
        } => {
            if let Some(s) = steps {
                cfg.opt.steps = s;
            }
            let ckpt = match checkpoint {
                Some(c) => c,
                None => need_out(&cli.common)?.join("model.ckpt"),
            };
            let opts = TrainOptions {
                resume,
                limit: overfit,
                save_every,
            };
            let r = cmd_train(&cfg, &dataset, &ckpt, &opts)?;
            println!(
                "trained steps {}..{} on {} samples; loss {:?} -> {:?}",
                r.start_step, r.end_step, r.n_samples, r.initial_loss, r.final_loss
            );
        }
        Command::Infer {
            dataset,
            checkpoint,
            split,
            guidance,
            denoiser,
            no_logs,
        } => {
            if let Some(d) = denoiser {
                cfg.infer.denoiser = match d {
                    DenoiserArg::Mlp => DenoiserKind::Mlp,
                    DenoiserArg::Analytic => DenoiserKind::Analytic,
                };
            }
            let opts = InferOptions {
                split: split.parse::<Split>()?,
                guidance_on: matches!(guidance, Toggle::On),
                write_logs: !no_logs,
            };
            let out = need_out(&cli.common)?;
            let r = cmd_infer(&cfg, checkpoint.as_deref(), &dataset, out, &opts)?;
            println!("{} records, {} failed {:?}", r.n, r.n_failed, r.failures);
        }
        Command::Eval {
            predictions,
            dataset,
            baseline,
        } => {
            let out = need_out(&cli.common)?;
            let ev = cmd_eval(&cfg, &predictions, &dataset, baseline.as_deref(), out)?;
            let s = &ev.report.summary;
            println!(
                "n {} failed {} missing {} ADD {:.3} Reproj {:.3}",
                s.n,
                s.n_failed,
                ev.report.missing.len(),
                s.add_rate,
                s.reproj_rate
            );
            for id in &ev.report.missing {
                eprintln!("MissingPrediction: {id}");
            }
            if let Some(d) = &ev.report.paired_delta {
                println!(
                    "vs baseline: ADD {:+.3} Reproj {:+.3} (gained {}, lost {})",
                    d.add_rate_delta, d.reproj_rate_delta, d.reproj_gained, d.reproj_lost
                );
            }
        }
        Command::Oracle {
            full,
            perturb_omega,
            filter,
        } => {
            let opts = OracleOptions {
                perturb_omega,
                full,
                work_dir: cli.common.out.as_ref().map(|o| o.join("work")),
                filter,
            };
            let report = run_oracles(&cfg, &opts, &mut |r| println!("{}", r.line()))?;
            println!(
                "{} oracles, {} failed, {:.1}s",
                report.results.len(),
                report.failed,
                report.seconds
            );
            if let Some(out) = &cli.common.out {
                std::fs::create_dir_all(out).map_err(CliError::io(out))?;
                let path = out.join("oracle.json");
                let text = serde_json::to_string_pretty(&report).map_err(CliError::json(&path))?;
                std::fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
            }
            if report.failed > 0 {
                return Err(CliError::OracleFailed {
                    failed: report.failed,
                    total: report.results.len(),
                });
            }
        }
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
