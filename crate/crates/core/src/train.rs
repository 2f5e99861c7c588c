//! Hyper-parameters, per-epoch history and checkpoint files shared by the
//! three training loops.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::serialize::{read_weights, save_weights};
use crate::nn::{AdamConfig, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    /// Box regression + objectness + class terms.
    BoxObjectnessClass,
    CategoricalCrossEntropy,
}

/// Training hyper-parameters for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    /// Fraction of the dataset held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<u64>,
    /// Stop once the worst per-sample training score reaches this value
    /// (Dice for segmentation, mAP@50 for detection, accuracy for
    /// classification).
    pub target_train_score: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::segmentation()
    }
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            epochs: 60,
            optimizer: Optimizer::Adam,
            loss: LossKind::Dice,
            validation_fraction: 0.1,
            max_steps: None,
            target_train_score: None,
            seed: 0,
        }
    }

    pub fn detection() -> Self {
        Self { batch_size: 64, learning_rate: 0.01, epochs: 600, loss: LossKind::BoxObjectnessClass, ..Self::segmentation() }
    }

    pub fn classification() -> Self {
        Self { batch_size: 256, learning_rate: 1e-4, epochs: 60, loss: LossKind::CategoricalCrossEntropy, ..Self::segmentation() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }

    /// True once `steps` hits the configured step budget.
    pub fn step_budget_spent(&self, steps: u64) -> bool {
        self.max_steps.is_some_and(|m| steps >= m)
    }
}

/// Scores logged after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    /// Mean training score measured after the epoch, when it was computed.
    pub train_score: Option<f64>,
    /// Worst per-sample training score.
    pub train_score_min: Option<f64>,
    pub val_score: Option<f64>,
}

/// Metadata written next to the weights blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta<C> {
    pub kind: String,
    pub model: C,
    pub train: TrainConfig,
    pub seed: u64,
    pub steps: u64,
    pub epochs_run: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub weights_fingerprint: u64,
}

impl<C> CheckpointMeta<C> {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.train_loss)
    }
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "meta.json";

/// Write `weights.bin` and `meta.json` into `dir`.
pub fn save_checkpoint<C: Serialize>(dir: &Path, meta: &CheckpointMeta<C>, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_weights(store, &dir.join(WEIGHTS_FILE))?;
    let json = serde_json::to_string_pretty(meta)?;
    let p = dir.join(META_FILE);
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// Read back a checkpoint directory, checking its kind.
pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(CheckpointMeta<C>, Vec<(String, Tensor<f32>)>)> {
    let p = dir.join(META_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CheckpointMeta<C> = serde_json::from_str(&text)?;
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {kind}", dir.display(), meta.kind)));
    }
    let weights = read_weights(&dir.join(WEIGHTS_FILE))?;
    Ok((meta, weights))
}

/// Keeps the parameters of the best epoch seen so far. Ties keep the
/// earlier epoch.
pub(crate) struct BestTracker {
    pub best: Option<(f64, usize, ParamStore<f32>)>,
}

impl BestTracker {
    pub fn new() -> Self {
        Self { best: None }
    }

    pub fn offer(&mut self, score: f64, epoch: usize, store: &ParamStore<f32>) {
        let better = match &self.best {
            None => true,
            Some((s, _, _)) => score > *s,
        };
        if better && score.is_finite() {
            self.best = Some((score, epoch, store.clone()));
        }
    }

    /// Best parameters, or `fallback` when no score was ever offered.
    pub fn finish(self, fallback: ParamStore<f32>) -> (ParamStore<f32>, Option<usize>) {
        match self.best {
            Some((_, e, s)) => (s, Some(e)),
            None => (fallback, None),
        }
    }
}

pub(crate) fn check_finite(loss: f64, steps: u64, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step: steps, learning_rate: lr })
    }
}

/// Indices `0..n` in an order drawn from `rng`.
pub(crate) fn shuffled(indices: &[usize], rng: &mut impl rand::Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v = indices.to_vec();
    v.shuffle(rng);
    v
}
