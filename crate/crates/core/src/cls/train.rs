use std::path::Path;

use ndarray::Array2;

use super::{balanced_batches, ClassifierOutput, ViTConfig, ViTModel};
use crate::dataset::{holdout_indices, NodulePatch};
use crate::error::{Error, Result};
use crate::nn::serialize::load_into;
use crate::nn::{Adam, Graph};
use crate::train::{check_finite, load_checkpoint, save_checkpoint, BestTracker, CheckpointMeta, EpochRecord, TrainConfig};

pub const CLS_CHECKPOINT_KIND: &str = "classification";
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct ClsCheckpoint {
    pub model: ViTModel,
    pub meta: CheckpointMeta<ViTConfig>,
}

impl ClsCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.meta, &self.model.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, weights) = load_checkpoint::<ViTConfig>(dir, CLS_CHECKPOINT_KIND)?;
        let mut model = ViTModel::new(&meta.model, meta.seed)?;
        load_into(&mut model.params, weights)?;
        if model.params.fingerprint() != meta.weights_fingerprint {
            return Err(Error::Checkpoint(format!("{}: weights do not match the recorded fingerprint", dir.display())));
        }
        Ok(Self { model, meta })
    }
}

fn accuracy(model: &ViTModel, patches: &[NodulePatch], idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let imgs: Vec<&Array2<f32>> = chunk.iter().map(|&i| &patches[i].pixels).collect();
        let out = model.predict(&imgs)?;
        correct += chunk.iter().zip(&out).filter(|(&i, o)| o.label == patches[i].label.index()).count();
    }
    Ok(Some(correct as f64 / idx.len() as f64))
}

/// Hold out the same fraction of every class, so a rare class is never
/// moved out of the training split entirely.
fn stratified_split(labels: &[usize], class_count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..class_count {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let (t, v) = holdout_indices(members.len(), fraction, seed.wrapping_add(c as u64));
        train.extend(t.into_iter().map(|i| members[i]));
        val.extend(v.into_iter().map(|i| members[i]));
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn train_classifier(patches: &[NodulePatch], config: &ViTConfig, hyper: &TrainConfig) -> Result<ClsCheckpoint> {
    train_classifier_with(patches, config, hyper, |r| {
        log::info!("cls epoch {} step {} loss {:.5} train acc {:?} val acc {:?}", r.epoch, r.steps, r.train_loss, r.train_score, r.val_score)
    })
}

/// As [`train_classifier`], reporting every epoch to `on_epoch`.
///
/// Batches are class balanced; the returned weights are those with the best
/// validation accuracy, or the best training accuracy without a hold-out.
pub fn train_classifier_with(
    patches: &[NodulePatch],
    config: &ViTConfig,
    hyper: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ClsCheckpoint> {
    hyper.validate()?;
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let side = config.image_size;
    if let Some(p) = patches.iter().find(|p| p.pixels.dim() != (side, side)) {
        return Err(Error::ShapeMismatch(format!("classifier expects {side}x{side} patches, got {:?}", p.pixels.dim())));
    }
    let labels: Vec<usize> = patches.iter().map(|p| p.label.index()).collect();
    if let Some(l) = labels.iter().find(|&&l| l >= config.class_count) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", config.class_count)));
    }
    let (train_idx, val_idx) = stratified_split(&labels, config.class_count, hyper.validation_fraction, hyper.seed);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    // surfaces a missing class before any work is done
    balanced_batches(&train_labels, config.class_count, hyper.batch_size, hyper.seed)?;

    let mut model = ViTModel::new(config, hyper.seed)?;
    let mut adam = Adam::new(hyper.adam());
    let mut best = BestTracker::new();
    let mut history = Vec::new();
    let score_train = val_idx.is_empty() || hyper.target_train_score.is_some();

    for epoch in 0..hyper.epochs {
        if hyper.step_budget_spent(adam.steps()) {
            break;
        }
        let batches = balanced_batches(&train_labels, config.class_count, hyper.batch_size, hyper.seed.wrapping_add(epoch as u64 + 1))?;
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in batches {
            if hyper.step_budget_spent(adam.steps()) {
                break;
            }
            let members: Vec<usize> = batch.iter().map(|&k| train_idx[k]).collect();
            let imgs: Vec<&Array2<f32>> = members.iter().map(|&i| &patches[i].pixels).collect();
            let targets: Vec<usize> = members.iter().map(|&i| labels[i]).collect();
            let tokens = model.tokens(&imgs)?;
            let grads = {
                let mut g = Graph::training(&model.params, hyper.seed.wrapping_add(adam.steps()));
                let x = g.input(tokens);
                let z = model.net.logits(&mut g, x);
                let loss = g.cross_entropy(z, &targets);
                let l = f64::from(g.value(loss).item());
                check_finite(l, adam.steps(), adam.learning_rate())?;
                loss_sum += l;
                g.backward(loss).into_param_grads()
            };
            adam.step(&mut model.params, &grads);
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let train_acc = if score_train { accuracy(&model, patches, &train_idx)? } else { None };
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            train_loss: loss_sum / steps as f64,
            train_score: train_acc,
            train_score_min: train_acc,
            val_score: accuracy(&model, patches, &val_idx)?,
        };
        on_epoch(&record);
        if let Some(s) = record.val_score.or(record.train_score) {
            best.offer(s, epoch, &model.params);
        }
        let reached = matches!((hyper.target_train_score, record.train_score), (Some(t), Some(a)) if a >= t);
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
        kind: CLS_CHECKPOINT_KIND.into(),
        model: config.clone(),
        train: hyper.clone(),
        seed: hyper.seed,
        steps,
        epochs_run,
        best_epoch,
        history,
        weights_fingerprint: model.params.fingerprint(),
    };
    Ok(ClsCheckpoint { model, meta })
}

pub fn classify(patch: &NodulePatch, ckpt: &ClsCheckpoint) -> Result<ClassifierOutput> {
    Ok(classify_batch(&[&patch.pixels], ckpt)?.remove(0))
}

pub fn classify_batch(images: &[&Array2<f32>], ckpt: &ClsCheckpoint) -> Result<Vec<ClassifierOutput>> {
    if images.iter().any(|p| p.iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(Error::NotNormalized);
    }
    ckpt.model.predict(images)
}
