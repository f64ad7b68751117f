//! The single JSON configuration document shared by every command.

use std::path::{Path, PathBuf};

use semiseg_core::annotation::AnchorBudget;
use semiseg_core::classifier::ArchConfig;
use semiseg_core::pipeline::StageConfig;
use semiseg_core::range::GridConfig;
use semiseg_core::sample::SampleConfig;
use semiseg_core::scene::{SceneConfig, SensorConfig};
use semiseg_core::segmentation::SegThresholds;
use semiseg_core::tracking::AssocConfig;
use semiseg_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File locations. Relative paths resolve against `work_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub work_dir: PathBuf,
    pub frames: PathBuf,
    pub truth: PathBuf,
    pub range_images: PathBuf,
    pub segments: PathBuf,
    pub samples: PathBuf,
    pub tracks: PathBuf,
    pub constraints: PathBuf,
    pub annotations: PathBuf,
    pub audit: PathBuf,
    pub params: PathBuf,
    pub checkpoints: PathBuf,
    pub loss: PathBuf,
    pub report: PathBuf,
    pub report_table: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("."),
            frames: "frames.jsonl".into(),
            truth: "truth.json".into(),
            range_images: "range_images".into(),
            segments: "segments.jsonl".into(),
            samples: "samples.json".into(),
            tracks: "tracks.jsonl".into(),
            constraints: "constraints.jsonl".into(),
            annotations: "annotations.jsonl".into(),
            audit: "audit.jsonl".into(),
            params: "params.bin".into(),
            checkpoints: "checkpoints".into(),
            loss: "loss.csv".into(),
            report: "report.json".into(),
            report_table: "report.csv".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// When set, overrides both `scene.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub segmentation: SegThresholds,
    /// Meters above the ground plane below which returns are dropped
    /// before segmentation.
    pub ground_clearance: f64,
    /// World height of the ground plane; defaults to minus the sensor
    /// mount height.
    pub ground_plane_z: Option<f64>,
    pub sample: SampleConfig,
    pub association: AssocConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub anchors: AnchorBudget,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let stage = StageConfig::default();
        Self {
            seed: None,
            scene: SceneConfig::default(),
            sensor: stage.sensor,
            grid: stage.grid,
            segmentation: stage.segmentation,
            ground_clearance: stage.ground_clearance,
            ground_plane_z: None,
            sample: stage.sample,
            association: stage.association,
            arch: stage.arch,
            train: TrainConfig::default(),
            anchors: AnchorBudget::default(),
            paths: Paths::default(),
        }
    }
}

fn key_of(section: &str, message: &str) -> String {
    let field: String = message.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
    if field.is_empty() {
        section.to_string()
    } else {
        format!("{section}.{field}")
    }
}

fn check<E: std::fmt::Display>(section: &str, r: std::result::Result<(), E>) -> Result<()> {
    r.map_err(|e| {
        let full = e.to_string();
        let message = full.split_once(": ").map(|(_, m)| m.to_string()).unwrap_or(full);
        Error::Config { key: key_of(section, &message), message }
    })
}

impl PipelineConfig {
    /// Parses a config document; errors carry the JSON path of the
    /// offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.paths.work_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.paths.work_dir = base.join(&cfg.paths.work_dir);
        }
        Ok(cfg)
    }

    /// Applies a global seed to the scene and the trainer.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
            self.scene.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        check("scene", self.scene.validate())?;
        check("sensor", self.sensor.validate())?;
        check("grid", self.grid.validate())?;
        check("segmentation", self.segmentation.validate())?;
        check("sample", self.sample.validate())?;
        check("association", self.association.validate())?;
        check("arch", self.arch.validate())?;
        check("train", self.train.validate())?;
        if !(self.ground_clearance >= 0.0) {
            return Err(Error::Config { key: "ground_clearance".into(), message: "must be >= 0".into() });
        }
        if self.sample.canvas != self.arch.input_size * self.arch.pool {
            return Err(Error::Config {
                key: "arch.input_size".into(),
                message: format!("input_size * pool must equal the sample canvas ({})", self.sample.canvas),
            });
        }
        Ok(())
    }

    pub fn stage(&self) -> StageConfig {
        StageConfig {
            sensor: self.sensor.clone(),
            grid: self.grid.clone(),
            segmentation: self.segmentation.clone(),
            ground_clearance: self.ground_clearance,
            sample: self.sample.clone(),
            association: self.association.clone(),
            arch: self.arch.clone(),
        }
    }

    pub fn ground_world_z(&self) -> f64 {
        self.ground_plane_z.unwrap_or(-self.sensor.mount_height)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.paths.resolve(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn seed_override() {
        let c = PipelineConfig::from_json(r#"{"seed": 42}"#).unwrap();
        assert_eq!((c.scene.seed, c.train.seed), (42, 42));
    }

    #[test]
    fn bad_values_name_their_key() {
        let e = PipelineConfig::from_json(r#"{"scene": {"frame_count": 0}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "scene.frame_count"), "{e}");
        let e = PipelineConfig::from_json(r#"{"train": {"gamma": 2.0}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "train.gamma"), "{e}");
    }

    #[test]
    fn type_errors_name_their_key() {
        let e = PipelineConfig::from_json(r#"{"sensor": {"scan_lines": "many"}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "sensor.scan_lines"), "{e}");
        let e = PipelineConfig::from_json(r#"{"sample": {"bogus": 1}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key.starts_with("sample")), "{e}");
    }
}
