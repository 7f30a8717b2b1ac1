//! `render-dataset`: seeded synthetic scenes written as raw float images.

use std::fs;
use std::path::Path;

use axisforge::extract::extract_axes_hard;
use axisforge::render::{apply_degradation, render_query, render_triaxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{DatasetRecord, Manifest, PoseRecord, Split, MANIFEST_SCHEMA};

pub const IMAGE_DIR: &str = "images";

pub fn cmd_render_dataset(cfg: &RunConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(CliError::Usage("n_train and n_test must be at least 1".into()));
    }
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(CliError::io(&img_dir))?;

    let k = cfg.intrinsics();
    let scene = &cfg.render.scene;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(n_train + n_test);
    for (split, n, degradation) in [
        (Split::Train, n_train, &cfg.render.train_degradation),
        (Split::Test, n_test, &cfg.render.test_degradation),
    ] {
        for i in 0..n {
            // at low resolution a short axis can render as a blob, so the
            // ground truth itself must survive extraction
            let mut rendered = None;
            let pose = scene
                .sample_where(&k, &mut rng, |p| {
                    rendered = render_triaxis(&k, p, scene.axis_len, cfg.render.thickness_px)
                        .ok()
                        .filter(|img| extract_axes_hard(img).is_ok());
                    rendered.is_some()
                })
                .map_err(|e| CliError::DegenerateSamplingExhausted(e.0))?;
            let triaxis = rendered.expect("accepted poses have a render");
            let seed: u64 = rng.random();
            let id = format!("{}-{i:05}", split.name());

            let query = render_query(&k, &pose, scene.half_extent)?;
            let spec = degradation.with_seed(seed);
            let degraded = apply_degradation(&query, &spec)?;

            let rel = |kind: &str| format!("{IMAGE_DIR}/{id}.{kind}.f32");
            let rec = DatasetRecord {
                id: id.clone(),
                split,
                pose: PoseRecord::from(&pose),
                intrinsics: k,
                query: rel("query"),
                triaxis: rel("triaxis"),
                degraded: rel("degraded"),
                degradation: spec,
                seed,
            };
            for (path, bytes) in [
                (&rec.query, query.to_f32_bytes()),
                (&rec.triaxis, triaxis.to_f32_bytes()),
                (&rec.degraded, degraded.to_f32_bytes()),
            ] {
                let path = out_dir.join(path);
                fs::write(&path, bytes).map_err(CliError::io(&path))?;
            }
            records.push(rec);
        }
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        config: cfg.clone(),
        records,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}
