//! Dataset manifest: one JSON document listing every record, with images
//! stored next to it as raw little-endian f32 buffers.

use std::fs;
use std::path::{Path, PathBuf};

use axisforge::image::Raster;
use axisforge::render::DegradationSpec;
use axisforge::{CameraIntrinsics, Pose, QueryImage, TriAxisImage};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(CliError::Usage(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

/// Row-major rotation and translation, exactly as stored in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(p: &PoseRecord) -> Self {
        let r = &p.rotation;
        Pose::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(p.translation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    pub pose: PoseRecord,
    pub intrinsics: CameraIntrinsics,
    /// Paths are relative to the manifest directory.
    pub query: String,
    pub triaxis: String,
    pub degraded: String,
    pub degradation: DegradationSpec,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn pose(&self) -> Pose {
        Pose::from(&self.pose)
    }

    fn size(&self) -> (usize, usize) {
        (self.intrinsics.width as usize, self.intrinsics.height as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// The configuration that produced the dataset.
    pub config: RunConfig,
    pub records: Vec<DatasetRecord>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(CliError::json(&path))?;
        fs::write(&path, text + "\n").map_err(CliError::io(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(CliError::json(&path))?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(CliError::Manifest(format!(
                "schema_version {} is not supported (expected {MANIFEST_SCHEMA})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

impl Dataset {
    /// Reads the manifest and checks every referenced file exists with the
    /// declared size.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let ds = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.manifest.records {
            if !seen.insert(r.id.as_str()) {
                return Err(CliError::Manifest(format!("duplicate record id {}", r.id)));
            }
            r.intrinsics
                .validate()
                .map_err(|e| CliError::Manifest(format!("record {}: {e}", r.id)))?;
            let (w, h) = r.size();
            for (rel, channels) in [(&r.query, 1), (&r.triaxis, 3), (&r.degraded, 1)] {
                let path = self.dir.join(rel);
                let meta = fs::metadata(&path).map_err(CliError::io(&path))?;
                let want = (w * h * channels * 4) as u64;
                if meta.len() != want {
                    return Err(CliError::Manifest(format!(
                        "{} has {} bytes, expected {want}",
                        path.display(),
                        meta.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn read_raster<const C: usize>(&self, rec: &DatasetRecord, rel: &str) -> Result<Raster<C>> {
        let path = self.dir.join(rel);
        let (w, h) = rec.size();
        Raster::<C>::read_f32(&path, w, h).map_err(CliError::io(&path))
    }

    pub fn query(&self, rec: &DatasetRecord) -> Result<QueryImage> {
        self.read_raster(rec, &rec.query)
    }

    pub fn triaxis(&self, rec: &DatasetRecord) -> Result<TriAxisImage> {
        self.read_raster(rec, &rec.triaxis)
    }

    pub fn degraded(&self, rec: &DatasetRecord) -> Result<QueryImage> {
        self.read_raster(rec, &rec.degraded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axisforge::camera::{rot_x, rot_z};

    #[test]
    fn pose_record_round_trip_is_exact() {
        let p = Pose::new(rot_x(31.0) * rot_z(-12.5), Vector3::new(0.1, -0.3, 4.2));
        let back = Pose::from(&PoseRecord::from(&p));
        assert_eq!(back, p);
        let text = serde_json::to_string(&PoseRecord::from(&p)).unwrap();
        let parsed: PoseRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(Pose::from(&parsed), p);
    }

    #[test]
    fn split_parsing() {
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert!(matches!("val".parse::<Split>(), Err(CliError::Usage(_))));
    }
}
