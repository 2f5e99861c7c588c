use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SegModel, SegNetConfig, DICE_EPS};
use crate::dataset::holdout_indices;
use crate::error::{Error, Result};
use crate::imaging::{keep_largest_components, CtVolume, LungMask};
use crate::metrics::dice_score;
use crate::nn::serialize::load_into;
use crate::nn::{Adam, Graph, Tensor};
use crate::train::{check_finite, load_checkpoint, save_checkpoint, shuffled, BestTracker, CheckpointMeta, EpochRecord, TrainConfig};

pub const SEG_CHECKPOINT_KIND: &str = "segmentation";

/// Trained segmenter plus its training record.
#[derive(Clone, Debug)]
pub struct SegCheckpoint {
    pub model: SegModel,
    pub meta: CheckpointMeta<SegNetConfig>,
}

impl SegCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.meta, &self.model.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, weights) = load_checkpoint::<SegNetConfig>(dir, SEG_CHECKPOINT_KIND)?;
        let mut model = SegModel::new(&meta.model, meta.seed)?;
        load_into(&mut model.params, weights)?;
        if model.params.fingerprint() != meta.weights_fingerprint {
            return Err(Error::Checkpoint(format!("{}: weights do not match the recorded fingerprint", dir.display())));
        }
        Ok(Self { model, meta })
    }
}

fn check_case(cube: usize, volume: &CtVolume, mask: &LungMask) -> Result<()> {
    if !volume.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if volume.shape() != [cube; 3] {
        return Err(Error::ShapeMismatch(format!("segmenter expects {cube}^3 volumes, got {:?}", volume.shape())));
    }
    mask.check_aligned(volume)
}

/// Threshold the model output and keep the two largest components.
fn predict_mask(model: &SegModel, volume: &CtVolume, threshold: f64) -> Result<LungMask> {
    let prob = model.predict(volume.voxels())?;
    let bin: Array3<u8> = prob.mapv(|p| u8::from(f64::from(p) > threshold));
    Ok(keep_largest_components(&LungMask::new(bin, volume.geometry())?, 2))
}

fn dice_per_case(model: &SegModel, cases: &[(CtVolume, LungMask)], idx: &[usize]) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let (v, m) = &cases[i];
            let pred = predict_mask(model, v, 0.5)?;
            dice_score(pred.voxels().view(), m.voxels().view())
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Train with [`TrainConfig`] hyper-parameters, logging each epoch.
pub fn train_segmenter(dataset: &[(CtVolume, LungMask)], config: &SegNetConfig, hyper: &TrainConfig) -> Result<SegCheckpoint> {
    train_segmenter_with(dataset, config, hyper, |r| {
        log::info!(
            "seg epoch {} step {} loss {:.5} train dice {:?} val dice {:?}",
            r.epoch,
            r.steps,
            r.train_loss,
            r.train_score,
            r.val_score
        )
    })
}

/// As [`train_segmenter`], reporting every epoch to `on_epoch`.
///
/// The returned weights are those of the epoch with the best validation
/// Dice, or the best training Dice when the hold-out set is empty.
pub fn train_segmenter_with(
    dataset: &[(CtVolume, LungMask)],
    config: &SegNetConfig,
    hyper: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<SegCheckpoint> {
    hyper.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = config.input_cube;
    for (v, m) in dataset {
        check_case(c, v, m)?;
    }
    let (train_idx, val_idx) = holdout_indices(dataset.len(), hyper.validation_fraction, hyper.seed);
    let mut model = SegModel::new(config, hyper.seed)?;
    let mut adam = Adam::new(hyper.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5e6_0001);
    let mut best = BestTracker::new();
    let mut history = Vec::new();
    let vox = c * c * c;
    let score_train = val_idx.is_empty() || hyper.target_train_score.is_some();

    for epoch in 0..hyper.epochs {
        if hyper.step_budget_spent(adam.steps()) {
            break;
        }
        let order = shuffled(&train_idx, &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(hyper.batch_size) {
            if hyper.step_budget_spent(adam.steps()) {
                break;
            }
            let b = batch.len();
            let mut x = Vec::with_capacity(b * vox);
            let mut t = Vec::with_capacity(b * vox);
            for &i in batch {
                x.extend(dataset[i].0.voxels().iter().copied());
                t.extend(dataset[i].1.voxels().iter().map(|&m| f32::from(m)));
            }
            let grads = {
                let mut g = Graph::training(&model.params, hyper.seed.wrapping_add(adam.steps()));
                let xv = g.input(Tensor::from_vec(&[b, 1, c, c, c], x));
                let p = model.net.forward(&mut g, xv);
                let loss = g.dice_loss(p, &Tensor::from_vec(&[b, 1, c, c, c], t), DICE_EPS);
                let l = f64::from(g.value(loss).item());
                check_finite(l, adam.steps(), adam.learning_rate())?;
                loss_sum += l;
                g.backward(loss).into_param_grads()
            };
            adam.step(&mut model.params, &grads);
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let train_dice = if score_train { dice_per_case(&model, dataset, &train_idx)? } else { Vec::new() };
        let val_dice = dice_per_case(&model, dataset, &val_idx)?;
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            train_loss: loss_sum / batches as f64,
            train_score: mean(&train_dice),
            train_score_min: train_dice.iter().copied().reduce(f64::min),
            val_score: mean(&val_dice),
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
        kind: SEG_CHECKPOINT_KIND.into(),
        model: config.clone(),
        train: hyper.clone(),
        seed: hyper.seed,
        steps,
        epochs_run,
        best_epoch,
        history,
        weights_fingerprint: model.params.fingerprint(),
    };
    Ok(SegCheckpoint { model, meta })
}

/// Lung mask for a normalised volume already resampled to the
/// checkpoint's cube.
pub fn segment(volume: &CtVolume, ckpt: &SegCheckpoint, threshold: f64) -> Result<LungMask> {
    if !volume.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let c = ckpt.model.config().input_cube;
    if volume.shape() != [c; 3] {
        return Err(Error::ShapeMismatch(format!("checkpoint expects {c}^3 volumes, got {:?}", volume.shape())));
    }
    if ckpt.model.config().out_channels != 1 {
        return Err(Error::InvalidArgument("segment needs a single-channel checkpoint".into()));
    }
    predict_mask(&ckpt.model, volume, threshold)
}
