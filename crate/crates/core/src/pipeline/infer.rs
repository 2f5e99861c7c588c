use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use super::overlay::{render_overlay, OverlayBox};
use super::{InferenceOptions, PipelineConfig};
use crate::boxes::BBox;
use crate::cls::{classify_batch, ClsCheckpoint};
use crate::dataset::{crop_patch, load_label_image, load_metaimage, Malignancy};
use crate::det::{detect, DetCheckpoint};
use crate::error::{Error, Result};
use crate::imaging::{
    binarize_lung_mask, clip_and_normalize_hu, crop_foreground, resample_mask_to_shape, resample_to_canonical, resample_volume_to_shape,
    CropBox, CtVolume, LungMask,
};
use crate::metrics::dice_score;
use crate::seg::{segment, SegCheckpoint};

pub const STAGE_ORDER: [&str; 3] = ["segmentation", "detection", "classification"];

/// The three trained stages, loaded once.
#[derive(Clone, Debug)]
pub struct Models {
    pub seg: SegCheckpoint,
    pub det: DetCheckpoint,
    pub cls: ClsCheckpoint,
}

impl Models {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let c = &config.paths.checkpoints;
        let seg = SegCheckpoint::load(&c.seg).map_err(|e| e.in_stage("segmentation"))?;
        let det = DetCheckpoint::load(&c.det).map_err(|e| e.in_stage("detection"))?;
        let cls = ClsCheckpoint::load(&c.cls).map_err(|e| e.in_stage("classification"))?;
        if cls.model.config().class_count != 2 {
            return Err(Error::Checkpoint("classifier must be binary (benign / malignant)".into()).in_stage("classification"));
        }
        Ok(Self { seg, det, cls })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LungSummary {
    pub voxel_count: usize,
    /// Dice against a reference mask, when one was supplied.
    pub dice_vs_reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportedDetection {
    pub id: usize,
    /// Axial index in the canonical cube.
    pub slice: usize,
    /// Normalised to the lung crop of that slice.
    pub bbox: BBox,
    pub score: f64,
    /// `(z, y, x)` of the box centre in the canonical cube.
    pub center_voxel: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleClassification {
    pub detection_id: usize,
    pub p_benign: f64,
    pub p_malignant: f64,
    pub label: Malignancy,
}

/// Deterministic summary of one case. Timings live in [`StageTimings`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub series_id: String,
    pub cube: usize,
    pub stages: Vec<String>,
    /// Set when the predicted lung mask is empty; nothing downstream ran.
    pub degenerate: bool,
    pub lung: LungSummary,
    pub crop: Option<CropBox>,
    pub detections: Vec<ReportedDetection>,
    pub nodules: Vec<NoduleClassification>,
}

/// Wall-clock milliseconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub segmentation_ms: f64,
    pub detection_ms: f64,
    pub classification_ms: f64,
}

/// Report plus the intermediate grids needed to draw overlays.
#[derive(Clone, Debug)]
pub struct CaseOutput {
    pub report: CaseReport,
    pub timings: StageTimings,
    pub volume: CtVolume,
    pub mask: LungMask,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn predict_lung(canonical: &CtVolume, seg: &SegCheckpoint, threshold: f64) -> Result<LungMask> {
    let c = seg.model.config().input_cube;
    if canonical.shape() == [c; 3] {
        return segment(canonical, seg, threshold);
    }
    let small = resample_volume_to_shape(canonical, [c; 3])?;
    resample_mask_to_shape(&segment(&small, seg, threshold)?, canonical.shape())
}

/// Run all three stages on a volume in Hounsfield units.
pub fn infer_case(series_id: &str, hu: &CtVolume, reference: Option<&LungMask>, models: &Models, cube: usize, options: &InferenceOptions) -> Result<CaseOutput> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let prepared = (|| {
        let normalized = clip_and_normalize_hu(hu)?;
        resample_to_canonical(&normalized, reference, cube)
    })()
    .map_err(|e| e.in_stage("preprocess"))?;
    for w in &prepared.warnings {
        log::warn!("{series_id}: {w}");
    }
    let volume = prepared.volume;
    timings.preprocess_ms = elapsed_ms(t);

    let t = Instant::now();
    let mask = predict_lung(&volume, &models.seg, options.seg_threshold).map_err(|e| e.in_stage("segmentation"))?;
    let dice_vs_reference = match &prepared.mask {
        Some(r) => Some(dice_score(mask.voxels().view(), r.voxels().view()).map_err(|e| e.in_stage("segmentation"))?),
        None => None,
    };
    timings.segmentation_ms = elapsed_ms(t);
    let mut report = CaseReport {
        series_id: series_id.to_string(),
        cube,
        stages: vec![STAGE_ORDER[0].into()],
        degenerate: mask.is_empty(),
        lung: LungSummary { voxel_count: mask.foreground_count(), dice_vs_reference },
        crop: None,
        detections: Vec::new(),
        nodules: Vec::new(),
    };
    if report.degenerate {
        return Ok(CaseOutput { report, timings, volume, mask });
    }

    let t = Instant::now();
    let (crop, crop_mask, bx) = crop_foreground(&volume, &mask, options.crop_margin).map_err(|e| e.in_stage("detection"))?;
    let [_, h, w] = crop.shape();
    for (z, plane) in crop.voxels().axis_iter(Axis(0)).enumerate() {
        let slice = z + bx.start[0];
        for d in detect(&plane.to_owned(), &models.det, slice).map_err(|e| e.in_stage("detection"))? {
            let py = ((d.bbox.cy * h as f64) as usize).min(h - 1);
            let px = ((d.bbox.cx * w as f64) as usize).min(w - 1);
            if options.mask_gate && crop_mask.voxels()[[z, py, px]] == 0 {
                continue;
            }
            report.detections.push(ReportedDetection {
                id: report.detections.len(),
                slice,
                bbox: d.bbox,
                score: d.score,
                center_voxel: [slice, py + bx.start[1], px + bx.start[2]],
            });
        }
    }
    report.crop = Some(bx);
    report.stages.push(STAGE_ORDER[1].into());
    timings.detection_ms = elapsed_ms(t);

    let t = Instant::now();
    let patches = report.detections.iter().map(|d| crop_patch(&volume, d.center_voxel)).collect::<Result<Vec<_>>>().map_err(|e| e.in_stage("classification"))?;
    let outputs = classify_batch(&patches.iter().collect::<Vec<_>>(), &models.cls).map_err(|e| e.in_stage("classification"))?;
    for (d, o) in report.detections.iter().zip(outputs) {
        report.nodules.push(NoduleClassification {
            detection_id: d.id,
            p_benign: o.probabilities[0],
            p_malignant: o.probabilities[1],
            label: o.malignancy().expect("binary classifier"),
        });
    }
    report.stages.push(STAGE_ORDER[2].into());
    timings.classification_ms = elapsed_ms(t);
    Ok(CaseOutput { report, timings, volume, mask })
}

/// Series id from a MetaImage path: the file stem.
pub fn series_id_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "case".into(), |s| s.to_string_lossy().into_owned())
}

/// Load a `.mhd` volume (and optional reference lung labels) and run
/// [`infer_case`] with checkpoints named in `config`.
pub fn run_inference(ct_path: &Path, reference_mask: Option<&Path>, config: &PipelineConfig) -> Result<CaseOutput> {
    let models = Models::load(config)?;
    let hu = load_metaimage(ct_path).map_err(|e| e.in_stage("load"))?;
    let reference = match reference_mask {
        Some(p) => {
            let (labels, g) = load_label_image(p).map_err(|e| e.in_stage("load"))?;
            let m = binarize_lung_mask(&labels, g).map_err(|e| e.in_stage("load"))?;
            m.check_aligned(&hu).map_err(|e| e.in_stage("load"))?;
            Some(m)
        }
        None => None,
    };
    infer_case(&series_id_of(ct_path), &hu, reference.as_ref(), &models, config.cube, &config.inference)
}

#[derive(Debug, Serialize)]
struct DetectionRow {
    slice: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    score: f64,
}

#[derive(Debug, Serialize)]
struct PredictionRow<'a> {
    series: &'a str,
    index: usize,
    p_benign: f64,
    p_malignant: f64,
    label: &'static str,
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Report, timings, CSVs and (optionally) one overlay per slice with
/// detections. Returns the written paths relative to `dir`.
pub fn write_case_outputs(dir: &Path, out: &CaseOutput, overlays: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &out.report;
    write_json(&dir.join(REPORT_FILE), r)?;
    write_json(&dir.join(TIMINGS_FILE), &out.timings)?;
    let mut det = csv::Writer::from_path(dir.join(DETECTIONS_FILE))?;
    for d in &r.detections {
        det.serialize(DetectionRow { slice: d.slice, cx: d.bbox.cx, cy: d.bbox.cy, w: d.bbox.w, h: d.bbox.h, score: d.score })?;
    }
    det.flush().map_err(|e| Error::io(dir, e))?;
    let mut pred = csv::Writer::from_path(dir.join(PREDICTIONS_FILE))?;
    for n in &r.nodules {
        pred.serialize(PredictionRow { series: &r.series_id, index: n.detection_id, p_benign: n.p_benign, p_malignant: n.p_malignant, label: n.label.as_str() })?;
    }
    pred.flush().map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<PathBuf> = [REPORT_FILE, TIMINGS_FILE, DETECTIONS_FILE, PREDICTIONS_FILE].iter().map(PathBuf::from).collect();

    if let (true, Some(bx)) = (overlays, r.crop) {
        let mut slices: Vec<usize> = r.detections.iter().map(|d| d.slice).collect();
        slices.dedup();
        for z in slices {
            let region = s![z, bx.start[1]..bx.end[1], bx.start[2]..bx.end[2]];
            let image = out.volume.voxels().slice(region).to_owned();
            let boxes: Vec<OverlayBox> = r
                .detections
                .iter()
                .filter(|d| d.slice == z)
                .map(|d| OverlayBox {
                    bbox: d.bbox,
                    score: d.score,
                    label: r.nodules.iter().find(|n| n.detection_id == d.id).map(|n| n.label.as_str()[..1].to_string()),
                })
                .collect();
            let name = PathBuf::from("overlays").join(format!("slice_{z:04}.png"));
            render_overlay(&image, Some(out.mask.voxels().slice(region)), &boxes, &dir.join(&name))?;
            written.push(name);
        }
    }
    Ok(written)
}
