use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::LabeledBox;
use crate::cls::{classify_batch, ClsCheckpoint};
use crate::dataset::metaimage::read_metaimage;
use crate::dataset::{
    classifier_patches, detection_samples, load_label_image, prepare_case, read_detection_samples, read_patch_bundle, read_phantom_bundle,
    write_detection_samples, write_metaimage, write_patch_bundle, DetectionSample, Malignancy, NodulePatch, VoxelData, BUNDLE_VOLUME,
};
use crate::det::{detect, DetCheckpoint};
use crate::error::{Error, Result};
use crate::imaging::{resample_mask_to_shape, resample_volume_to_shape, CtVolume, LungMask};
use crate::metrics::{confusion_and_scores, dice_score, map_at_50, map_at_50_95, BinaryScores};
use crate::seg::{segment, SegCheckpoint};

/// Directory layout written by [`prepare_bundles`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedLayout {
    pub root: PathBuf,
}

impl PreparedLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// One sub-directory per case with `volume.mhd` and `mask.mhd`.
    pub fn seg_dir(&self) -> PathBuf {
        self.root.join("seg")
    }

    pub fn det_dir(&self) -> PathBuf {
        self.root.join("det")
    }

    pub fn cls_dir(&self) -> PathBuf {
        self.root.join("cls")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub cases: usize,
    pub detection_slices: usize,
    pub patches: usize,
    pub warnings: Vec<String>,
}

/// Sub-directories of `root` that hold a bundle volume, sorted by name.
pub fn discover_bundles(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(BUNDLE_VOLUME).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

const CASE_VOLUME: &str = "volume.mhd";
const CASE_MASK: &str = "mask.mhd";

/// Normalise and resample every bundle to `cube`, then write segmentation
/// cases, detection slices and classifier patches under `layout`.
pub fn prepare_bundles(bundles: &[PathBuf], layout: &PreparedLayout, cube: usize, crop_margin: usize) -> Result<PrepSummary> {
    if bundles.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut summary = PrepSummary::default();
    let mut samples = Vec::new();
    let mut patches = Vec::new();
    for dir in bundles {
        let b = read_phantom_bundle(dir)?;
        let case = prepare_case(&b.series_id, &b.volume, &b.mask, &b.annotations, cube)?;
        summary.warnings.extend(case.warnings.iter().map(|w| format!("{}: {w}", b.series_id)));
        let case_dir = layout.seg_dir().join(&b.series_id);
        fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        write_metaimage(&case_dir.join(CASE_VOLUME), VoxelData::Float(case.volume.voxels()), &case.volume.geometry())?;
        write_metaimage(&case_dir.join(CASE_MASK), VoxelData::UChar(case.mask.voxels()), &case.mask.geometry())?;
        if !case.mask.is_empty() {
            samples.extend(detection_samples(&case, crop_margin)?.0);
        }
        patches.extend(classifier_patches(&case)?);
        summary.cases += 1;
    }
    write_detection_samples(&layout.det_dir(), &samples)?;
    if !patches.is_empty() {
        write_patch_bundle(&layout.cls_dir(), &patches)?;
    }
    summary.detection_slices = samples.len();
    summary.patches = patches.len();
    Ok(summary)
}

/// A prepared segmentation case.
#[derive(Clone, Debug)]
pub struct SegCase {
    pub series_id: String,
    pub volume: CtVolume,
    pub mask: LungMask,
}

pub fn read_seg_cases(layout: &PreparedLayout) -> Result<Vec<SegCase>> {
    let root = layout.seg_dir();
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CASE_VOLUME).is_file())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| {
            let m = read_metaimage(&d.join(CASE_VOLUME))?;
            let volume = CtVolume::new_normalized(m.values, m.geometry)?;
            let (labels, g) = load_label_image(&d.join(CASE_MASK))?;
            let mask = LungMask::new(labels.mapv(|v| u8::from(v != 0)), g)?;
            mask.check_aligned(&volume)?;
            let series_id = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(SegCase { series_id, volume, mask })
        })
        .collect()
}

pub fn read_det_samples(layout: &PreparedLayout) -> Result<Vec<DetectionSample>> {
    let dir = layout.det_dir();
    if !dir.join("images").is_dir() {
        return Ok(Vec::new());
    }
    read_detection_samples(&dir)
}

pub fn read_patches(layout: &PreparedLayout) -> Result<Vec<NodulePatch>> {
    let dir = layout.cls_dir();
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    read_patch_bundle(&dir)
}

/// Cases resampled to the segmenter's input cube.
pub fn seg_training_pairs(cases: &[SegCase], input_cube: usize) -> Result<Vec<(CtVolume, LungMask)>> {
    cases
        .iter()
        .map(|c| {
            if c.volume.shape() == [input_cube; 3] {
                Ok((c.volume.clone(), c.mask.clone()))
            } else {
                Ok((resample_volume_to_shape(&c.volume, [input_cube; 3])?, resample_mask_to_shape(&c.mask, [input_cube; 3])?))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvaluation {
    pub per_case: Vec<(String, f64)>,
    pub mean_dice: f64,
}

pub fn evaluate_segmentation(cases: &[SegCase], ckpt: &SegCheckpoint, threshold: f64) -> Result<SegEvaluation> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs = seg_training_pairs(cases, ckpt.model.config().input_cube)?;
    let per_case = cases
        .iter()
        .zip(&pairs)
        .map(|(c, (v, m))| Ok((c.series_id.clone(), dice_score(segment(v, ckpt, threshold)?.voxels().view(), m.voxels().view())?)))
        .collect::<Result<Vec<_>>>()?;
    let mean_dice = per_case.iter().map(|(_, d)| d).sum::<f64>() / per_case.len() as f64;
    Ok(SegEvaluation { per_case, mean_dice })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetEvaluation {
    pub slices: usize,
    pub map_50: Option<f64>,
    pub map_50_95: Option<f64>,
}

pub fn evaluate_detection(samples: &[DetectionSample], ckpt: &DetCheckpoint) -> Result<DetEvaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dets = samples.iter().map(|s| detect(&s.image, ckpt, s.slice)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<LabeledBox>> = samples.iter().map(|s| s.labels.iter().map(|l| LabeledBox { bbox: l.bbox(), class_id: l.class_id }).collect()).collect();
    Ok(DetEvaluation { slices: samples.len(), map_50: map_at_50(&dets, &gts)?, map_50_95: map_at_50_95(&dets, &gts)? })
}

/// Malignant is the positive class.
pub fn evaluate_classification(patches: &[NodulePatch], ckpt: &ClsCheckpoint) -> Result<BinaryScores> {
    let images: Vec<_> = patches.iter().map(|p| &p.pixels).collect();
    let out = classify_batch(&images, ckpt)?;
    let predicted: Vec<bool> = out.iter().map(|o| o.malignancy() == Some(Malignancy::Malignant)).collect();
    let truth: Vec<bool> = patches.iter().map(|p| p.label == Malignancy::Malignant).collect();
    confusion_and_scores(&predicted, &truth)
}
