//! Vision-Transformer malignancy classifier over 64x64 nodule patches.

mod batches;
mod model;
mod train;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Malignancy;
use crate::error::{Error, Result};

pub use batches::{balanced_batches, BalancedBatches};
pub use model::{MultiHeadAttention, ViT, ViTModel};
pub use train::{classify, classify_batch, train_classifier, train_classifier_with, ClsCheckpoint, CLS_CHECKPOINT_KIND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub projection_dim: usize,
    pub encoder_blocks: usize,
    pub attention_heads: usize,
    /// Hidden widths of the encoder MLP; a final projection returns to
    /// `projection_dim` when the last width differs.
    pub mlp_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub class_count: usize,
    pub dropout: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            projection_dim: 64,
            encoder_blocks: 8,
            attention_heads: 4,
            mlp_hidden: vec![64, 128],
            head_hidden: vec![2048, 1024],
            class_count: 2,
            dropout: 0.1,
        }
    }
}

impl ViTConfig {
    pub fn token_count(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Values per flattened patch.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size)));
        }
        if self.attention_heads == 0 || self.projection_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!("projection dim {} is not divisible by {} heads", self.projection_dim, self.attention_heads)));
        }
        if self.projection_dim == 0 || self.mlp_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Row-major non-overlapping `patch x patch` tiles, one flattened tile per
/// row of the result.
pub fn patchify(image: &Array2<f32>, patch: usize) -> Result<Array2<f32>> {
    let (h, w) = image.dim();
    if h != w || patch == 0 || h % patch != 0 {
        return Err(Error::ShapeMismatch(format!("cannot tile a {h}x{w} image with {patch}x{patch} patches")));
    }
    let per_row = w / patch;
    Ok(Array2::from_shape_fn((per_row * per_row, patch * patch), |(t, i)| {
        let (ty, tx) = (t / per_row, t % per_row);
        let (py, px) = (i / patch, i % patch);
        image[[ty * patch + py, tx * patch + px]]
    }))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Array2<f32>, patch: usize) -> Result<Array2<f32>> {
    let (n, len) = tokens.dim();
    let per_row = (n as f64).sqrt().round() as usize;
    if patch == 0 || len != patch * patch || per_row * per_row != n {
        return Err(Error::ShapeMismatch(format!("{n} tokens of length {len} do not form a square of {patch}x{patch} patches")));
    }
    let side = per_row * patch;
    Ok(Array2::from_shape_fn((side, side), |(y, x)| tokens[[(y / patch) * per_row + x / patch, (y % patch) * patch + x % patch]]))
}

/// Softmax probabilities and the winning class of one patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub probabilities: Vec<f64>,
    pub label: usize,
    pub logits: Vec<f64>,
}

impl ClassifierOutput {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let probabilities: Vec<f64> = e.iter().map(|v| v / s).collect();
        let label = probabilities
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
        Self { probabilities, label, logits }
    }

    /// Label as a malignancy class when the head is binary.
    pub fn malignancy(&self) -> Option<Malignancy> {
        (self.probabilities.len() == 2).then(|| Malignancy::from_index(self.label)).flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_patching_gives_64_tokens_of_64_values() {
        let c = ViTConfig::default();
        c.validate().unwrap();
        assert_eq!(c.token_count(), 64);
        let img = Array2::from_shape_fn((64, 64), |(y, x)| (y * 64 + x) as f32);
        let t = patchify(&img, 8).unwrap();
        assert_eq!(t.dim(), (64, 64));
        // token 1 is the tile right of the first one
        assert_eq!(t[[1, 0]], 8.0);
        assert_eq!(t[[8, 0]], (8 * 64) as f32);
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let t = patchify(&Array2::from_elem((64, 64), 0.3), 8).unwrap();
        assert!(t.rows().into_iter().all(|r| r == t.row(0)));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(patchify(&Array2::zeros((64, 60)), 8).is_err());
        assert!(patchify(&Array2::zeros((60, 60)), 8).is_err());
        assert!(ViTConfig { attention_heads: 3, ..Default::default() }.validate().is_err());
        assert!(ViTConfig { image_size: 60, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn output_probabilities_and_argmax() {
        let o = ClassifierOutput::from_logits(vec![0.2, 1.7]);
        assert!((o.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(o.label, 1);
        assert_eq!(o.malignancy(), Some(Malignancy::Malignant));
    }

    proptest! {
        #[test]
        fn patchify_round_trips(vals in prop::collection::vec(-1.0f32..1.0, 16 * 16), p in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
            let img = Array2::from_shape_vec((16, 16), vals).unwrap();
            prop_assert_eq!(unpatchify(&patchify(&img, p).unwrap(), p).unwrap(), img);
        }

        #[test]
        fn softmax_is_shift_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0, shift in -50.0f64..50.0) {
            let x = ClassifierOutput::from_logits(vec![a, b]);
            let y = ClassifierOutput::from_logits(vec![a + shift, b + shift]);
            for (p, q) in x.probabilities.iter().zip(&y.probabilities) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            prop_assert_eq!(x.label, y.label);
        }
    }
}
