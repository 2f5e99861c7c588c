//! Per-slice YOLO boxes derived from spherical nodule annotations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NoduleAnnotation;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::imaging::CtVolume;

/// Boxes narrower or shorter than this many pixels after clamping are dropped.
pub const MIN_BOX_PIXELS: f64 = 2.0;

/// One line of a YOLO label file; coordinates normalised to the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YoloLabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl YoloLabelRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn from_bbox(class_id: usize, b: BBox) -> Self {
        Self { class_id, cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }

    pub fn to_line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6} {:.6}", self.class_id, self.cx, self.cy, self.w, self.h)
    }
}

/// Boxes for every axial slice cut by the annotation's sphere. Box centres
/// sit at the nodule's in-plane voxel centre; each half-width is the radius
/// of the circular cross-section at that slice.
pub fn slice_bounding_boxes(annotation: &NoduleAnnotation, volume: &CtVolume) -> Result<Vec<(usize, YoloLabelRecord)>> {
    let idx = volume.geometry().world_to_voxel(annotation.center, volume.shape())?;
    let [depth, height, width] = volume.shape();
    let [sz, sy, sx] = volume.spacing();
    let r = annotation.radius();
    let cz = annotation.center[0];
    let oz = volume.origin()[0];
    // pixel i covers [i, i + 1) in image units
    let (px, py) = (idx[2] + 0.5, idx[1] + 0.5);
    let (wf, hf) = (width as f64, height as f64);
    let mut out = Vec::new();
    for z in 0..depth {
        let dz = oz + z as f64 * sz - cz;
        if dz.abs() > r {
            continue;
        }
        let rz = (r * r - dz * dz).sqrt();
        let (hw, hh) = (rz / sx, rz / sy);
        let clipped = BBox::from_corners([px - hw, py - hh, px + hw, py + hh]).clamped(wf, hf);
        if clipped.w < MIN_BOX_PIXELS || clipped.h < MIN_BOX_PIXELS {
            continue;
        }
        out.push((z, YoloLabelRecord::from_bbox(0, clipped.scaled(1.0 / wf, 1.0 / hf))));
    }
    Ok(out)
}

pub fn format_yolo_labels(records: &[YoloLabelRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

pub fn write_yolo_labels(records: &[YoloLabelRecord], path: &Path) -> Result<()> {
    fs::write(path, format_yolo_labels(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_yolo_labels(text: &str) -> Result<Vec<YoloLabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::LabelLine { line: i + 1, message };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let class_id = f[0].parse().map_err(|_| bad(format!("class `{}` is not a non-negative integer", f[0])))?;
        let mut v = [0.0; 4];
        for (k, t) in f[1..].iter().enumerate() {
            v[k] = t.parse::<f64>().ok().filter(|x| (0.0..=1.0).contains(x)).ok_or_else(|| bad(format!("`{t}` is not in [0, 1]")))?;
        }
        out.push(YoloLabelRecord { class_id, cx: v[0], cy: v[1], w: v[2], h: v[3] });
    }
    Ok(out)
}

pub fn read_yolo_labels(path: &Path) -> Result<Vec<YoloLabelRecord>> {
    parse_yolo_labels(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
