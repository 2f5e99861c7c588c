//! Turning raw cases into detector slices and classifier patches.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::export::{read_slice_png, write_slice_png};
use super::labels::{read_yolo_labels, slice_bounding_boxes, write_yolo_labels, YoloLabelRecord};
use super::metaimage::{read_metaimage, write_metaimage, VoxelData};
use super::patches::{extract_classifier_patch, NodulePatch, PatchSource, PATCH_SIZE};
use super::{Malignancy, NoduleAnnotation};
use crate::error::{Error, Result};
use crate::imaging::{clip_and_normalize_hu, crop_foreground, resample_to_canonical, CropBox, CtVolume, Geometry, LungMask};

/// A case normalised and resampled onto the canonical cube.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub series_id: String,
    pub volume: CtVolume,
    pub mask: LungMask,
    pub annotations: Vec<NoduleAnnotation>,
    pub warnings: Vec<String>,
}

/// Clip and normalise, then resample volume and mask to `cube`³.
pub fn prepare_case(series_id: &str, volume: &CtVolume, mask: &LungMask, annotations: &[NoduleAnnotation], cube: usize) -> Result<PreparedCase> {
    let normalized = clip_and_normalize_hu(volume)?;
    let r = resample_to_canonical(&normalized, Some(mask), cube)?;
    Ok(PreparedCase {
        series_id: series_id.to_string(),
        volume: r.volume,
        mask: r.mask.expect("mask was supplied"),
        annotations: annotations.to_vec(),
        warnings: r.warnings,
    })
}

/// One axial slice of the lung crop with its nodule boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub series_id: String,
    /// Slice index in the canonical grid.
    pub slice: usize,
    pub image: Array2<f32>,
    pub labels: Vec<YoloLabelRecord>,
}

/// Slices of the lung bounding box that contain at least one nodule box.
/// Nodules whose centre falls outside the crop are skipped.
pub fn detection_samples(case: &PreparedCase, margin: usize) -> Result<(Vec<DetectionSample>, CropBox)> {
    let (crop, _, bx) = crop_foreground(&case.volume, &case.mask, margin)?;
    let depth = crop.shape()[0];
    let mut per_slice: Vec<Vec<YoloLabelRecord>> = vec![Vec::new(); depth];
    for a in &case.annotations {
        match slice_bounding_boxes(a, &crop) {
            Ok(boxes) => {
                for (z, r) in boxes {
                    per_slice[z].push(r);
                }
            }
            Err(Error::OutOfBounds { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let samples = per_slice
        .into_iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(z, labels)| DetectionSample {
            series_id: case.series_id.clone(),
            slice: z + bx.start[0],
            image: crop.voxels().index_axis(Axis(0), z).to_owned(),
            labels,
        })
        .collect();
    Ok((samples, bx))
}

/// Patches for every labelled annotation of a case.
pub fn classifier_patches(case: &PreparedCase) -> Result<Vec<NodulePatch>> {
    case.annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| a.malignancy.is_some())
        .map(|(i, a)| extract_classifier_patch(&case.volume, a, i))
        .collect()
}

fn sample_stem(s: &DetectionSample) -> String {
    format!("{}_{:04}", s.series_id, s.slice)
}

/// `images/<stem>.png` plus `labels/<stem>.txt` for each sample.
pub fn write_detection_samples(dir: &Path, samples: &[DetectionSample]) -> Result<()> {
    let (img_dir, lbl_dir) = (dir.join("images"), dir.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        let stem = sample_stem(s);
        write_slice_png(&img_dir.join(format!("{stem}.png")), &s.image)?;
        write_yolo_labels(&s.labels, &lbl_dir.join(format!("{stem}.txt")))?;
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Read a directory written by [`write_detection_samples`]. Images without
/// a label file are treated as empty slices.
pub fn read_detection_samples(dir: &Path) -> Result<Vec<DetectionSample>> {
    let mut out = Vec::new();
    for img in sorted_files(&dir.join("images"), "png")? {
        let stem = img.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let lbl = dir.join("labels").join(format!("{stem}.txt"));
        let labels = if lbl.exists() { read_yolo_labels(&lbl)? } else { Vec::new() };
        let (series_id, slice) = match stem.rsplit_once('_') {
            Some((s, z)) => (s.to_string(), z.parse().unwrap_or(0)),
            None => (stem.clone(), 0),
        };
        out.push(DetectionSample { series_id, slice, image: read_slice_png(&img)?, labels });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchRow {
    series: String,
    index: usize,
    label: Malignancy,
}

pub const PATCH_STACK: &str = "patches.mhd";
pub const PATCH_INDEX: &str = "patches.csv";

/// Stack patches into an `N x 64 x 64` MET_FLOAT image with a CSV index.
pub fn write_patch_bundle(dir: &Path, patches: &[NodulePatch]) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stack = Array3::<f32>::zeros((patches.len(), PATCH_SIZE, PATCH_SIZE));
    for (mut plane, p) in stack.axis_iter_mut(Axis(0)).zip(patches) {
        plane.assign(&p.pixels);
    }
    write_metaimage(&dir.join(PATCH_STACK), VoxelData::Float(&stack), &Geometry::unit())?;
    let mut w = csv::Writer::from_path(dir.join(PATCH_INDEX))?;
    for p in patches {
        w.serialize(PatchRow { series: p.source.series_id.clone(), index: p.source.index, label: p.label })?;
    }
    w.flush().map_err(|e| Error::io(dir, e))
}

pub fn read_patch_bundle(dir: &Path) -> Result<Vec<NodulePatch>> {
    let stack = read_metaimage(&dir.join(PATCH_STACK))?.values;
    let shape = stack.shape();
    if shape[1] != PATCH_SIZE || shape[2] != PATCH_SIZE {
        return Err(Error::ShapeMismatch(format!("patch stack planes are {}x{}", shape[1], shape[2])));
    }
    let mut rdr = csv::Reader::from_path(dir.join(PATCH_INDEX))?;
    let rows: Vec<PatchRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.len() != shape[0] {
        return Err(Error::ShapeMismatch(format!("{} index rows for {} patches", rows.len(), shape[0])));
    }
    Ok(rows
        .into_iter()
        .zip(stack.axis_iter(Axis(0)))
        .map(|(r, plane)| NodulePatch { pixels: plane.to_owned(), label: r.label, source: PatchSource { series_id: r.series, index: r.index } })
        .collect())
}
