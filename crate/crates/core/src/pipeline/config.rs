use std::fs;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::cls::ViTConfig;
use crate::det::DetNetConfig;
use crate::error::{Error, Result};
use crate::seg::SegNetConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub seg: PathBuf,
    pub det: PathBuf,
    pub cls: PathBuf,
}

impl Default for CheckpointPaths {
    fn default() -> Self {
        Self { seg: "checkpoints/seg".into(), det: "checkpoints/det".into(), cls: "checkpoints/cls".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    pub checkpoints: CheckpointPaths,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_root: "data".into(), output_root: "out".into(), checkpoints: CheckpointPaths::default() }
    }
}

/// Each table is merged over its stage preset, so a partial `[train.det]`
/// keeps the detection defaults for the keys it leaves out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTraining {
    #[serde(deserialize_with = "over_segmentation")]
    pub seg: TrainConfig,
    #[serde(deserialize_with = "over_detection")]
    pub det: TrainConfig,
    #[serde(deserialize_with = "over_classification")]
    pub cls: TrainConfig,
}

fn merged<'de, D: Deserializer<'de>>(preset: TrainConfig, d: D) -> std::result::Result<TrainConfig, D::Error> {
    let partial = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
    let mut full = match serde_json::to_value(preset).map_err(D::Error::custom)? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("TrainConfig serialises to a map"),
    };
    full.extend(partial);
    serde_json::from_value(serde_json::Value::Object(full)).map_err(D::Error::custom)
}

fn over_segmentation<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    merged(TrainConfig::segmentation(), d)
}

fn over_detection<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    merged(TrainConfig::detection(), d)
}

fn over_classification<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    merged(TrainConfig::classification(), d)
}

impl Default for StageTraining {
    fn default() -> Self {
        Self { seg: TrainConfig::segmentation(), det: TrainConfig::detection(), cls: TrainConfig::classification() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    /// Foreground probability cut for the lung mask.
    pub seg_threshold: f64,
    /// Drop detections whose centre falls outside the predicted lung mask.
    pub mask_gate: bool,
    /// Voxels added around the lung bounding box before detection.
    pub crop_margin: usize,
    pub overlays: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { seg_threshold: 0.5, mask_gate: true, crop_margin: 0, overlays: true }
    }
}

/// Everything a run needs, read from one TOML file layered over the
/// built-in defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Side of the canonical cube volumes are resampled to.
    pub cube: usize,
    pub paths: Paths,
    pub seg: SegNetConfig,
    pub det: DetNetConfig,
    pub cls: ViTConfig,
    pub train: StageTraining,
    pub inference: InferenceOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cube: 256,
            paths: Paths::default(),
            seg: SegNetConfig::default(),
            det: DetNetConfig::default(),
            cls: ViTConfig::default(),
            train: StageTraining::default(),
            inference: InferenceOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The top-level seed drives every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seg.seed = seed;
        self.train.det.seed = seed;
        self.train.cls.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.cube == 0 {
            return Err(Error::Config("cube must be positive".into()));
        }
        self.seg.validate()?;
        self.det.validate()?;
        self.cls.validate()?;
        self.train.seg.validate()?;
        self.train.det.validate()?;
        self.train.cls.validate()?;
        if !(0.0..=1.0).contains(&self.inference.seg_threshold) {
            return Err(Error::Config(format!("seg_threshold {} is outside [0, 1]", self.inference.seg_threshold)));
        }
        Ok(())
    }
}
