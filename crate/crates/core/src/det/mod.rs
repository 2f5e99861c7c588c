//! Single-stage anchor-based nodule detector on axial slices: CSP-style
//! backbone, SPPF, a top-down/bottom-up aggregation neck and a three-scale
//! anchor head.

mod anchors;
mod head;
mod letterbox;
mod model;
mod nms;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use anchors::{anchors_from_sizes, kmeans_anchors};
pub use head::{assign_targets, decode_box, decode_predictions, detection_loss, encode_box, Assignment, LossBreakdown};
pub use letterbox::Letterbox;
pub use model::{DetModel, DetNet};
pub use nms::nms;
pub use train::{detect, train_detector, train_detector_with, DetCheckpoint, DET_CHECKPOINT_KIND};

/// Feature strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_SCALE: usize = 3;

/// `[scale][anchor] = [w, h]` in input pixels.
pub type AnchorSet = [[[f64; 2]; ANCHORS_PER_SCALE]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box_: 0.05, obj: 1.0, cls: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetNetConfig {
    /// Side of the square network input, in pixels.
    pub input_size: usize,
    pub anchors: AnchorSet,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub class_count: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub loss_weights: LossWeights,
    /// Objectness weight per scale, finest first.
    pub objectness_balance: [f64; 3],
    /// A target matches an anchor when every side ratio is below this.
    pub anchor_ratio_limit: f64,
    pub hflip_probability: f64,
    pub max_detections: usize,
}

impl Default for DetNetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            // nodule-sized priors for 256 px slices (about 1.4 mm per pixel)
            anchors: [[[3.0, 3.0], [5.0, 5.0], [7.0, 7.0]], [[10.0, 10.0], [13.0, 13.0], [17.0, 17.0]], [[22.0, 22.0], [30.0, 30.0], [40.0, 40.0]]],
            width_multiple: 0.5,
            depth_multiple: 0.33,
            class_count: 1,
            conf_threshold: 0.3,
            nms_iou: 0.45,
            loss_weights: LossWeights::default(),
            objectness_balance: [4.0, 1.0, 0.4],
            anchor_ratio_limit: 4.0,
            hflip_probability: 0.5,
            max_detections: 300,
        }
    }
}

impl DetNetConfig {
    /// Values per anchor: 4 box terms, objectness, class logits.
    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.class_count
    }

    /// Channels of each head output.
    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_SCALE * self.outputs_per_anchor()
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.input_size / s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::InvalidArgument(format!("input size {} is not a positive multiple of 32", self.input_size)));
        }
        if self.anchors.iter().flatten().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("anchors must be positive".into()));
        }
        for (name, v) in [("conf_threshold", self.conf_threshold), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if !(self.width_multiple > 0.0 && self.depth_multiple > 0.0) {
            return Err(Error::Config("width and depth multiples must be positive".into()));
        }
        if !(self.anchor_ratio_limit > 1.0) {
            return Err(Error::Config("anchor_ratio_limit must exceed 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::Config("hflip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
