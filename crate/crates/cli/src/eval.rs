//! `eval`: score predictions against the manifest's ground truth.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use axisforge::metrics::{evaluate_suite, median, EvalInput, MetricsReport, ModelPoints, Summary};
use axisforge::Pose;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::infer::{read_predictions, read_run, write_jsonl, Prediction, RUN_FILE};
use crate::manifest::{Dataset, Split};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";

/// Column order of `summary.csv`. Empty cells mean the median is undefined.
pub const SUMMARY_COLUMNS: [&str; 10] = [
    "n",
    "n_failed",
    "n_missing",
    "add_rate",
    "reproj_rate",
    "median_rot_deg",
    "median_trans_err",
    "median_add",
    "median_reproj_px",
    "median_geo_loss",
];

pub const MISSING: &str = "MissingPrediction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub summary: Summary,
    pub missing: Vec<String>,
    pub median_geo_loss: Option<f64>,
    pub paired_delta: Option<PairedDelta>,
}

/// This run minus a baseline run over the same records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub n: usize,
    pub add_rate_delta: f64,
    pub reproj_rate_delta: f64,
    /// Records passing here but failing in the baseline, and the reverse.
    pub reproj_gained: usize,
    pub reproj_lost: usize,
    pub add_gained: usize,
    pub add_lost: usize,
    pub median_geo_loss: Option<f64>,
    pub baseline_median_geo_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub report: EvalReport,
}

fn split_of(pred_dir: &Path) -> Result<Split> {
    if pred_dir.join(RUN_FILE).exists() {
        Ok(read_run(pred_dir)?.split)
    } else {
        Ok(Split::Test)
    }
}

/// Pairs predictions with dataset records. Records without a prediction
/// become metric failures.
pub fn evaluate_predictions(
    cfg: &RunConfig,
    ds: &Dataset,
    split: Split,
    preds: &[Prediction],
) -> Result<(MetricsReport, Vec<String>)> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let records: Vec<_> = ds.manifest.split(split).collect();
    let known: std::collections::HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    if let Some(p) = preds.iter().find(|p| !known.contains(p.id.as_str())) {
        return Err(CliError::Manifest(format!(
            "prediction {} has no {} record in the dataset",
            p.id,
            split.name()
        )));
    }
    let mut missing = Vec::new();
    let inputs: Vec<EvalInput> = records
        .iter()
        .map(|r| {
            let pred = match by_id.get(r.id.as_str()) {
                None => {
                    missing.push(r.id.clone());
                    Err(MISSING.to_string())
                }
                Some(p) => match (&p.pose, p.ok) {
                    (Some(pose), true) => Ok(Pose::from(pose)),
                    _ => Err(format!(
                        "{}: {}",
                        p.error_kind.as_deref().unwrap_or("Unknown"),
                        p.error.as_deref().unwrap_or("")
                    )),
                },
            };
            EvalInput {
                id: r.id.clone(),
                gt: r.pose(),
                pred,
            }
        })
        .collect();
    let model = ModelPoints::cuboid(ds.manifest.config.render.scene.half_extent);
    let k = ds
        .manifest
        .config
        .intrinsics()
        .resized(cfg.eval.reference_width, cfg.eval.reference_height);
    Ok((evaluate_suite(&inputs, &model, &k, &cfg.eval.thresholds), missing))
}

fn median_geo(preds: &[Prediction]) -> Option<f64> {
    let mut v: Vec<f64> = preds.iter().filter_map(|p| p.geo_loss).collect();
    median(&mut v)
}

pub fn paired_delta(run: &MetricsReport, base: &MetricsReport, geo: Option<f64>, base_geo: Option<f64>) -> PairedDelta {
    let base_by_id: HashMap<&str, _> = base.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut d = PairedDelta {
        n: 0,
        add_rate_delta: run.summary.add_rate - base.summary.add_rate,
        reproj_rate_delta: run.summary.reproj_rate - base.summary.reproj_rate,
        reproj_gained: 0,
        reproj_lost: 0,
        add_gained: 0,
        add_lost: 0,
        median_geo_loss: geo,
        baseline_median_geo_loss: base_geo,
    };
    for r in &run.records {
        let Some(b) = base_by_id.get(r.id.as_str()) else {
            continue;
        };
        d.n += 1;
        d.reproj_gained += usize::from(r.reproj_pass && !b.reproj_pass);
        d.reproj_lost += usize::from(!r.reproj_pass && b.reproj_pass);
        d.add_gained += usize::from(r.add_pass && !b.add_pass);
        d.add_lost += usize::from(!r.add_pass && b.add_pass);
    }
    d
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn summary_csv(report: &EvalReport) -> String {
    let s = &report.summary;
    let row = [
        s.n.to_string(),
        s.n_failed.to_string(),
        report.missing.len().to_string(),
        s.add_rate.to_string(),
        s.reproj_rate.to_string(),
        cell(s.median_rot_deg),
        cell(s.median_trans_err),
        cell(s.median_add),
        cell(s.median_reproj_px),
        cell(report.median_geo_loss),
    ];
    format!("{}\n{}\n", SUMMARY_COLUMNS.join(","), row.join(","))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    pred_dir: &Path,
    dataset_dir: &Path,
    baseline_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<Evaluation> {
    cfg.validate()?;
    let ds = Dataset::open(dataset_dir)?;
    let split = split_of(pred_dir)?;
    let preds = read_predictions(pred_dir)?;
    let (metrics, missing) = evaluate_predictions(cfg, &ds, split, &preds)?;
    let geo = median_geo(&preds);

    let paired = match baseline_dir {
        Some(b) => {
            let base_split = split_of(b)?;
            if base_split != split {
                return Err(CliError::Usage(format!(
                    "baseline covers the {} split, predictions cover {}",
                    base_split.name(),
                    split.name()
                )));
            }
            let base_preds = read_predictions(b)?;
            let (base, _) = evaluate_predictions(cfg, &ds, split, &base_preds)?;
            Some(paired_delta(&metrics, &base, geo, median_geo(&base_preds)))
        }
        None => None,
    };

    let report = EvalReport {
        split,
        summary: metrics.summary.clone(),
        missing,
        median_geo_loss: geo,
        paired_delta: paired,
    };
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    write_jsonl(&out_dir.join(RECORDS_FILE), &metrics.records)?;
    let path = out_dir.join(SUMMARY_FILE);
    fs::write(&path, summary_csv(&report)).map_err(CliError::io(&path))?;
    let path = out_dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).map_err(CliError::json(&path))?;
    fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
    Ok(Evaluation { metrics, report })
}
