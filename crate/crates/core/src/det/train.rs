use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::head::{assign_targets, decode_predictions, detection_loss};
use super::letterbox::Letterbox;
use super::model::DetModel;
use super::nms::nms;
use super::DetNetConfig;
use crate::boxes::{BBox, Detection2D, LabeledBox};
use crate::dataset::{holdout_indices, DetectionSample};
use crate::error::{Error, Result};
use crate::metrics::map_at_50;
use crate::nn::serialize::load_into;
use crate::nn::{Adam, Graph, Tensor};
use crate::train::{check_finite, load_checkpoint, save_checkpoint, shuffled, BestTracker, CheckpointMeta, EpochRecord, TrainConfig};

pub const DET_CHECKPOINT_KIND: &str = "detection";

/// Images per inference forward pass.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct DetCheckpoint {
    pub model: DetModel,
    pub meta: CheckpointMeta<DetNetConfig>,
}

impl DetCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.meta, &self.model.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, weights) = load_checkpoint::<DetNetConfig>(dir, DET_CHECKPOINT_KIND)?;
        let mut model = DetModel::new(&meta.model, meta.seed)?;
        load_into(&mut model.params, weights)?;
        if model.params.fingerprint() != meta.weights_fingerprint {
            return Err(Error::Checkpoint(format!("{}: weights do not match the recorded fingerprint", dir.display())));
        }
        Ok(Self { model, meta })
    }
}

/// A slice letterboxed to the network input with canvas-normalised labels.
#[derive(Clone)]
struct Canvas {
    image: Array2<f32>,
    labels: Vec<LabeledBox>,
}

fn to_canvas(sample: &DetectionSample, size: usize) -> Result<Canvas> {
    let (h, w) = sample.image.dim();
    let lb = Letterbox::new(h, w, size)?;
    Ok(Canvas {
        image: lb.apply(&sample.image)?,
        labels: sample.labels.iter().map(|r| LabeledBox { bbox: lb.to_canvas(&r.bbox()), class_id: r.class_id }).collect(),
    })
}

fn mirrored(c: &Canvas) -> Canvas {
    let mut image = c.image.clone();
    image.invert_axis(Axis(1));
    let labels = c
        .labels
        .iter()
        .map(|l| LabeledBox { bbox: BBox::new(1.0 - l.bbox.cx, l.bbox.cy, l.bbox.w, l.bbox.h), class_id: l.class_id })
        .collect();
    Canvas { image: image.as_standard_layout().to_owned(), labels }
}

/// Decode, suppress and cap detections for a batch of canvases.
fn predict_canvases(model: &DetModel, images: &[&Array2<f32>], slice: usize) -> Result<Vec<Vec<Detection2D>>> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let flat: Vec<Vec<f32>> = chunk.iter().map(|im| im.iter().copied().collect()).collect();
        let refs: Vec<&[f32]> = flat.iter().map(|v| v.as_slice()).collect();
        let raw = model.raw_outputs(&refs);
        for dets in decode_predictions(&[&raw[0], &raw[1], &raw[2]], cfg, slice)? {
            let mut kept = nms(&dets, cfg.nms_iou);
            kept.truncate(cfg.max_detections);
            out.push(kept);
        }
    }
    Ok(out)
}

fn map50(model: &DetModel, canvases: &[Canvas], idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let images: Vec<&Array2<f32>> = idx.iter().map(|&i| &canvases[i].image).collect();
    let dets = predict_canvases(model, &images, 0)?;
    let gts: Vec<Vec<LabeledBox>> = idx.iter().map(|&i| canvases[i].labels.clone()).collect();
    map_at_50(&dets, &gts)
}

pub fn train_detector(samples: &[DetectionSample], config: &DetNetConfig, hyper: &TrainConfig) -> Result<DetCheckpoint> {
    train_detector_with(samples, config, hyper, |r| {
        log::info!("det epoch {} step {} loss {:.5} train mAP50 {:?} val mAP50 {:?}", r.epoch, r.steps, r.train_loss, r.train_score, r.val_score)
    })
}

/// Adam on the detection loss. Weights are taken from the epoch with the
/// best validation mAP@50 (training mAP@50 when nothing is held out).
pub fn train_detector_with(
    samples: &[DetectionSample],
    config: &DetNetConfig,
    hyper: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<DetCheckpoint> {
    hyper.validate()?;
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if samples.iter().all(|s| s.labels.is_empty()) {
        return Err(Error::NoPositiveLabels);
    }
    let size = config.input_size;
    let canvases: Vec<Canvas> = samples.iter().map(|s| to_canvas(s, size)).collect::<Result<_>>()?;
    let (train_idx, val_idx) = holdout_indices(samples.len(), hyper.validation_fraction, hyper.seed);
    let mut model = DetModel::new(config, hyper.seed)?;
    let mut adam = Adam::new(hyper.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xde7_0001);
    let mut best = BestTracker::new();
    let mut history = Vec::new();
    let score_train = val_idx.is_empty() || hyper.target_train_score.is_some();

    for epoch in 0..hyper.epochs {
        if hyper.step_budget_spent(adam.steps()) {
            break;
        }
        let order = shuffled(&train_idx, &mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for batch in order.chunks(hyper.batch_size) {
            if hyper.step_budget_spent(adam.steps()) {
                break;
            }
            let flips: Vec<bool> = batch.iter().map(|_| rng.random_bool(config.hflip_probability)).collect();
            let items: Vec<std::borrow::Cow<'_, Canvas>> = batch
                .iter()
                .zip(&flips)
                .map(|(&i, &f)| if f { std::borrow::Cow::Owned(mirrored(&canvases[i])) } else { std::borrow::Cow::Borrowed(&canvases[i]) })
                .collect();
            let mut x = Vec::with_capacity(batch.len() * size * size);
            for c in &items {
                x.extend(c.image.iter().copied());
            }
            let labels: Vec<Vec<LabeledBox>> = items.iter().map(|c| c.labels.clone()).collect();
            let assigned = assign_targets(config, &labels);
            let grads = {
                let mut g = Graph::training(&model.params, hyper.seed.wrapping_add(adam.steps()));
                let xv = g.input(Tensor::from_vec(&[batch.len(), 1, 1, size, size], x));
                let raw = model.net.forward(&mut g, xv);
                let (loss, parts) = detection_loss(&mut g, &raw, &assigned, config);
                check_finite(parts.total, adam.steps(), adam.learning_rate())?;
                loss_sum += parts.total;
                g.backward(loss).into_param_grads()
            };
            adam.step(&mut model.params, &grads);
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let train_map = if score_train { map50(&model, &canvases, &train_idx)? } else { None };
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            train_loss: loss_sum / batches as f64,
            train_score: train_map,
            train_score_min: train_map,
            val_score: map50(&model, &canvases, &val_idx)?,
        };
        on_epoch(&record);
        if let Some(s) = record.val_score.or(record.train_score) {
            best.offer(s, epoch, &model.params);
        }
        let reached = matches!((hyper.target_train_score, record.train_score_min), (Some(t), Some(m)) if m >= t);
        history.push(record);
        if reached {
            break;
        }
    }
    let steps = adam.steps();
    let epochs_run = history.len();
    let (params, best_epoch) = best.finish(model.params);
    model.params = params;
    let meta = CheckpointMeta {
        kind: DET_CHECKPOINT_KIND.into(),
        model: config.clone(),
        train: hyper.clone(),
        seed: hyper.seed,
        steps,
        epochs_run,
        best_epoch,
        history,
        weights_fingerprint: model.params.fingerprint(),
    };
    Ok(DetCheckpoint { model, meta })
}

/// Detections on one slice image of any size, in coordinates normalised
/// to that image, after confidence filtering and NMS.
pub fn detect(image: &Array2<f32>, ckpt: &DetCheckpoint, slice: usize) -> Result<Vec<Detection2D>> {
    let (h, w) = image.dim();
    let lb = Letterbox::new(h, w, ckpt.model.config().input_size)?;
    let canvas = lb.apply(image)?;
    let dets = predict_canvases(&ckpt.model, &[&canvas], slice)?.pop().unwrap_or_default();
    Ok(dets.into_iter().map(|d| Detection2D { bbox: lb.to_source(&d.bbox), ..d }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::YoloLabelRecord;

    fn blob_sample(i: usize) -> DetectionSample {
        let (cx, cy, r) = (12.0 + (i % 5) as f64 * 8.0, 14.0 + (i / 5) as f64 * 7.0, 4.0 + (i % 3) as f64);
        let image = Array2::from_shape_fn((48, 56), |(y, x)| {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            if d2 <= r * r {
                0.9
            } else {
                0.1
            }
        });
        let rec = YoloLabelRecord { class_id: 0, cx: cx / 56.0, cy: cy / 48.0, w: 2.0 * r / 56.0, h: 2.0 * r / 48.0 };
        DetectionSample { series_id: "t".into(), slice: i, image, labels: vec![rec] }
    }

    fn small() -> DetNetConfig {
        DetNetConfig { input_size: 64, width_multiple: 0.125, hflip_probability: 0.5, ..Default::default() }
    }

    #[test]
    fn refuses_datasets_without_positives() {
        let mut s = blob_sample(0);
        s.labels.clear();
        assert!(matches!(train_detector(&[s], &small(), &TrainConfig::detection()), Err(Error::NoPositiveLabels)));
        assert!(matches!(train_detector(&[], &small(), &TrainConfig::detection()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn loss_decreases_and_first_epoch_is_reproducible() {
        let samples: Vec<_> = (0..8).map(blob_sample).collect();
        let hyper = TrainConfig { batch_size: 8, learning_rate: 2e-3, epochs: 30, validation_fraction: 0.0, seed: 3, ..TrainConfig::detection() };
        let a = train_detector(&samples, &small(), &hyper).unwrap();
        let h = &a.meta.history;
        assert!(h.last().unwrap().train_loss < h[0].train_loss, "{:?}", h.iter().map(|r| r.train_loss).collect::<Vec<_>>());
        let one = TrainConfig { epochs: 1, ..hyper };
        let b = train_detector(&samples, &small(), &one).unwrap();
        let c = train_detector(&samples, &small(), &one).unwrap();
        assert_eq!(b.meta.history[0].train_loss, c.meta.history[0].train_loss);
        assert_eq!(b.meta.history[0].train_loss, h[0].train_loss);
    }

    #[test]
    fn checkpoint_round_trips_and_detect_checks_input() {
        let samples = vec![blob_sample(1)];
        let hyper = TrainConfig { batch_size: 1, epochs: 1, validation_fraction: 0.0, ..TrainConfig::detection() };
        let ck = train_detector(&samples, &small(), &hyper).unwrap();

        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = DetCheckpoint::load(dir.path()).unwrap();
        let img = &samples[0].image;
        assert_eq!(detect(img, &ck, 0).unwrap(), detect(img, &back, 0).unwrap());
        assert!(detect(&Array2::zeros((0, 4)), &back, 0).is_err());
    }

    #[test]
    fn mirroring_flips_boxes() {
        let c = to_canvas(&blob_sample(2), 64).unwrap();
        let m = mirrored(&c);
        assert_eq!(m.image[[10, 0]], c.image[[10, 63]]);
        assert!((m.labels[0].bbox.cx - (1.0 - c.labels[0].bbox.cx)).abs() < 1e-12);
    }
}
