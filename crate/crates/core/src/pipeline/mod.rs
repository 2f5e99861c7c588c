//! End-to-end orchestration: configuration, preprocessing of bundles,
//! segmentation -> detection -> classification, reports and overlays.

mod config;
mod infer;
mod overlay;
mod prepared;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{CheckpointPaths, InferenceOptions, Paths, PipelineConfig, StageTraining};
pub use infer::{
    infer_case, run_inference, series_id_of, write_case_outputs, CaseOutput, CaseReport, LungSummary, Models, NoduleClassification,
    ReportedDetection, StageTimings, DETECTIONS_FILE, PREDICTIONS_FILE, REPORT_FILE, STAGE_ORDER, TIMINGS_FILE,
};
pub use overlay::{box_pixels, overlay_image, render_overlay, OverlayBox, OVERLAY_SCALE};
pub use prepared::{
    discover_bundles, evaluate_classification, evaluate_detection, evaluate_segmentation, prepare_bundles, read_det_samples, read_patches,
    read_seg_cases, seg_training_pairs, DetEvaluation, PrepSummary, PreparedLayout, SegCase, SegEvaluation,
};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written into every output directory: enough to repeat the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: PipelineConfig,
    pub version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            args,
            seed: config.seed,
            config: config.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        Ok(serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?)
    }
}
