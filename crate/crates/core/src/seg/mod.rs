//! Volumetric lung segmentation: 3D U-Net and 3D Res-U-Net.

mod train;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvGeom, ConvTranspose, Element, Graph, InstanceNorm, ParamStore, Tensor, Var};

pub use train::{segment, train_segmenter, train_segmenter_with, SegCheckpoint, SEG_CHECKPOINT_KIND};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegVariant {
    Plain,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    /// Voxels per side of the (cubic) input.
    pub input_cube: usize,
    /// Channels per resolution level, shallow to deep.
    pub filter_schedule: Vec<usize>,
    /// Convolutions per residual block.
    pub residual_subunits: usize,
    pub out_channels: usize,
    pub variant: SegVariant,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { input_cube: 64, filter_schedule: vec![24, 48, 96, 192], residual_subunits: 4, out_channels: 1, variant: SegVariant::Residual }
    }
}

impl SegNetConfig {
    pub fn levels(&self) -> usize {
        self.filter_schedule.len()
    }

    /// Side of the deepest feature grid.
    pub fn bottleneck_cube(&self) -> usize {
        self.input_cube >> (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fs = &self.filter_schedule;
        if fs.is_empty() || fs[0] == 0 || fs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("filter_schedule must be positive and strictly increasing, got {fs:?}")));
        }
        if self.residual_subunits == 0 {
            return Err(Error::Config("residual_subunits must be at least 1".into()));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be at least 1".into()));
        }
        let factor = 1usize << (fs.len() - 1);
        if self.input_cube == 0 || self.input_cube % factor != 0 {
            return Err(Error::InvalidArgument(format!("input cube {} is not divisible by {factor}", self.input_cube)));
        }
        Ok(())
    }
}

/// conv 3³ -> instance norm, optionally followed by ReLU.
#[derive(Clone, Debug)]
struct Unit {
    conv: Conv,
    norm: InstanceNorm,
}

impl Unit {
    fn new(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, ConvGeom::cube(3, 1, 1), false, rng),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout, rng),
        }
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var, relu: bool) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        if relu {
            g.relu(y)
        } else {
            y
        }
    }
}

/// One resolution level's convolution stack.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    units: Vec<Unit>,
    /// `Some` for residual blocks; the inner option is the projection used
    /// when channel counts differ.
    shortcut: Option<Option<Conv>>,
}

impl ConvBlock {
    fn plain(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let units = vec![Unit::new(store, &format!("{name}.u0"), cin, cout, rng), Unit::new(store, &format!("{name}.u1"), cout, cout, rng)];
        Self { units, shortcut: None }
    }

    fn residual(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, subunits: usize, rng: &mut ChaCha8Rng) -> Self {
        let units = (0..subunits)
            .map(|i| Unit::new(store, &format!("{name}.u{i}"), if i == 0 { cin } else { cout }, cout, rng))
            .collect();
        let proj = (cin != cout).then(|| Conv::new(store, &format!("{name}.proj"), cin, cout, ConvGeom::cube(1, 1, 0), true, rng));
        Self { units, shortcut: Some(proj) }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        match &self.shortcut {
            None => self.units.iter().fold(x, |h, u| u.forward(g, h, true)),
            Some(proj) => {
                let last = self.units.len() - 1;
                let mut h = x;
                for (i, u) in self.units.iter().enumerate() {
                    h = u.forward(g, h, i < last);
                }
                let skip = match proj {
                    Some(p) => p.forward(g, x),
                    None => x,
                };
                g.add(h, skip)
            }
        }
    }
}

/// Encoder-decoder layer layout. Parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub config: SegNetConfig,
    encoder: Vec<ConvBlock>,
    up: Vec<ConvTranspose>,
    decoder: Vec<ConvBlock>,
    head: Conv,
}

impl SegNet {
    /// Register all layers in `store`, initialised from `rng`.
    pub fn build(config: &SegNetConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let fs = &config.filter_schedule;
        let block = |store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| match config.variant {
            SegVariant::Plain => ConvBlock::plain(store, name, cin, cout, rng),
            SegVariant::Residual => ConvBlock::residual(store, name, cin, cout, config.residual_subunits, rng),
        };
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, &f) in fs.iter().enumerate() {
            encoder.push(block(store, &format!("enc{i}"), cin, f, rng));
            cin = f;
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for i in (0..fs.len() - 1).rev() {
            up.push(ConvTranspose::new(store, &format!("up{i}"), fs[i + 1], fs[i], [2, 2, 2], rng));
            decoder.push(block(store, &format!("dec{i}"), 2 * fs[i], fs[i], rng));
        }
        let head = Conv::new(store, "head", fs[0], config.out_channels, ConvGeom::cube(1, 1, 0), true, rng);
        Ok(Self { config: config.clone(), encoder, up, decoder, head })
    }

    /// Raw head output `[B, out, D, H, W]`.
    pub fn logits<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let mut skips = Vec::new();
        let mut h = x;
        for (i, blk) in self.encoder.iter().enumerate() {
            h = blk.forward(g, h);
            if i + 1 < self.encoder.len() {
                skips.push(h);
                h = g.max_pool3d(h, ConvGeom::cube(2, 2, 0));
            }
        }
        for (up, blk) in self.up.iter().zip(&self.decoder) {
            let u = up.forward(g, h);
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = g.concat(&[u, skip], 1);
            h = blk.forward(g, cat);
        }
        self.head.forward(g, h)
    }

    /// Probabilities: sigmoid for one output channel, channel softmax
    /// otherwise.
    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let z = self.logits(g, x);
        if self.config.out_channels == 1 {
            return g.sigmoid(z);
        }
        let z = g.permute(z, &[0, 2, 3, 4, 1]);
        let p = g.softmax(z);
        g.permute(p, &[0, 4, 1, 2, 3])
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub net: SegNet,
    pub params: ParamStore<f32>,
}

impl SegModel {
    pub fn new(config: &SegNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = SegNet::build(config, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.net.config
    }

    /// Foreground probability for one normalised cube.
    pub fn predict(&self, voxels: &Array3<f32>) -> Result<Array3<f32>> {
        let c = self.config().input_cube;
        if voxels.shape() != [c, c, c] {
            return Err(Error::ShapeMismatch(format!("segmenter expects {c}^3 input, got {:?}", voxels.shape())));
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(Tensor::from_vec(&[1, 1, c, c, c], voxels.iter().copied().collect()));
        let p = self.net.forward(&mut g, x);
        let data = g.value(p).data()[..c * c * c].to_vec();
        Ok(Array3::from_shape_vec((c, c, c), data).expect("cube-sized output"))
    }
}

/// Plain 3D U-Net: two conv-norm-ReLU per level.
pub fn build_unet3d(config: &SegNetConfig, seed: u64) -> Result<SegModel> {
    if config.variant != SegVariant::Plain {
        return Err(Error::Config("build_unet3d needs variant = plain".into()));
    }
    SegModel::new(config, seed)
}

/// 3D Res-U-Net: a residual block of `residual_subunits` convolutions per level.
pub fn build_res_unet3d(config: &SegNetConfig, seed: u64) -> Result<SegModel> {
    if config.variant != SegVariant::Residual {
        return Err(Error::Config("build_res_unet3d needs variant = residual".into()));
    }
    SegModel::new(config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::soft_dice_with_grad;
    use proptest::prelude::*;

    fn tiny(variant: SegVariant) -> SegNetConfig {
        SegNetConfig { input_cube: 8, filter_schedule: vec![2, 4], residual_subunits: 2, out_channels: 1, variant }
    }

    fn params_by_formula(cfg: &SegNetConfig) -> usize {
        let conv3 = |cin: usize, cout: usize| 27 * cin * cout + 2 * cout;
        let block = |cin: usize, cout: usize| match cfg.variant {
            SegVariant::Plain => conv3(cin, cout) + conv3(cout, cout),
            SegVariant::Residual => {
                conv3(cin, cout)
                    + (cfg.residual_subunits - 1) * conv3(cout, cout)
                    + if cin == cout { 0 } else { cin * cout + cout }
            }
        };
        let fs = &cfg.filter_schedule;
        let mut total = 0;
        let mut cin = 1;
        for &f in fs {
            total += block(cin, f);
            cin = f;
        }
        for i in 0..fs.len() - 1 {
            total += 8 * fs[i + 1] * fs[i] + fs[i];
            total += block(2 * fs[i], fs[i]);
        }
        total + fs[0] * cfg.out_channels + cfg.out_channels
    }

    #[test]
    fn parameter_counts_match_formula_and_residual_is_larger() {
        let plain = SegNetConfig { variant: SegVariant::Plain, ..SegNetConfig::default() };
        let res = SegNetConfig::default();
        let np = build_unet3d(&plain, 0).unwrap().params.numel();
        let nr = build_res_unet3d(&res, 0).unwrap().params.numel();
        assert_eq!(np, params_by_formula(&plain));
        assert_eq!(nr, params_by_formula(&res));
        assert!(nr > np);
    }

    #[test]
    fn builders_reject_wrong_variant_and_bad_cube() {
        assert!(build_unet3d(&SegNetConfig::default(), 0).is_err());
        let bad = SegNetConfig { input_cube: 36, ..SegNetConfig::default() };
        assert!(matches!(SegModel::new(&bad, 0), Err(Error::InvalidArgument(_))));
        assert!(SegModel::new(&SegNetConfig { filter_schedule: vec![8, 8], ..SegNetConfig::default() }, 0).is_err());
        assert!(SegModel::new(&SegNetConfig { residual_subunits: 0, ..SegNetConfig::default() }, 0).is_err());
    }

    #[test]
    fn bottleneck_of_64_cube_is_8_cube_with_192_channels() {
        let cfg = SegNetConfig::default();
        assert_eq!(cfg.bottleneck_cube(), 8);
        let m = SegModel::new(&SegNetConfig { filter_schedule: vec![2, 3, 4, 5], ..cfg }, 1).unwrap();
        let mut g = Graph::inference(&m.params);
        let x = g.input(Tensor::zeros(&[1, 1, 64, 64, 64]));
        let mut h = m.net.encoder[0].forward(&mut g, x);
        for blk in &m.net.encoder[1..] {
            h = g.max_pool3d(h, ConvGeom::cube(2, 2, 0));
            h = blk.forward(&mut g, h);
        }
        assert_eq!(g.shape(h), &[1, 5, 8, 8, 8]);
    }

    #[test]
    fn both_variants_preserve_shape_and_output_probabilities() {
        for v in [SegVariant::Plain, SegVariant::Residual] {
            let cfg = SegNetConfig { input_cube: 32, filter_schedule: vec![2, 4, 6], ..tiny(v) };
            let m = SegModel::new(&cfg, 3).unwrap();
            let vol = Array3::from_shape_fn((32, 32, 32), |(z, y, x)| ((z * 7 + y * 3 + x) % 11) as f32 / 10.0);
            let p = m.predict(&vol).unwrap();
            assert_eq!(p.shape(), &[32, 32, 32]);
            // f32 sigmoid rounds to exactly 0 or 1 for large logits
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn multi_channel_output_sums_to_one() {
        let cfg = SegNetConfig { out_channels: 3, ..tiny(SegVariant::Plain) };
        let m = SegModel::new(&cfg, 2).unwrap();
        let mut g = Graph::inference(&m.params);
        let x = g.input(Tensor::from_fn(&[1, 1, 8, 8, 8], |i| (i % 5) as f32));
        let p = m.net.forward(&mut g, x);
        assert_eq!(g.shape(p), &[1, 3, 8, 8, 8]);
        let d = g.value(p).data();
        for i in 0..512 {
            let s: f32 = (0..3).map(|c| d[c * 512 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zeroed_residual_branch_is_identity_up_to_projection() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let same = ConvBlock::residual(&mut store, "a", 3, 3, 4, &mut rng);
        let proj = ConvBlock::residual(&mut store, "b", 3, 5, 4, &mut rng);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains(".u") && p.name.ends_with("conv.weight")).map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = Tensor::from_fn(&[1, 3, 4, 4, 4], |i| ((i * 37) % 17) as f32 - 8.0);
        let mut g = Graph::inference(&store);
        let x = g.input(input.clone());
        let y = same.forward(&mut g, x);
        assert_eq!(g.value(y).data(), input.data());

        let z = proj.forward(&mut g, x);
        let p = proj.shortcut.as_ref().unwrap().as_ref().unwrap();
        let projected = p.forward(&mut g, x);
        assert_eq!(g.value(z).data(), g.value(projected).data());
    }

    #[test]
    fn dice_loss_examples() {
        let t = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let (same, _) = soft_dice_with_grad(&t, &t, DICE_EPS);
        assert!(same.abs() < 1e-5);
        let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        assert!((soft_dice_with_grad(&inv, &t, DICE_EPS).0 - 1.0).abs() < 1e-5);
        let half = [0.5f64; 8];
        // 1 - (2*2 + eps) / (4 + 4 + eps)
        let expected = 1.0 - (4.0 + DICE_EPS) / (8.0 + DICE_EPS);
        assert!((soft_dice_with_grad(&half, &t, DICE_EPS).0 - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-6);
    }

    fn dice_by_loops(p: &[f64], t: &[f64]) -> f64 {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut st = 0.0;
        for i in 0..p.len() {
            inter += p[i] * t[i];
            sp += p[i];
            st += t[i];
        }
        1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
    }

    proptest! {
        #[test]
        fn dice_loss_gradient_matches_central_differences(
            p in prop::collection::vec(0.05f64..0.95, 64),
            t in prop::collection::vec(prop::bool::ANY, 64),
        ) {
            let t: Vec<f64> = t.into_iter().map(f64::from).collect();
            let (l, grad) = soft_dice_with_grad(&p, &t, DICE_EPS);
            prop_assert!((l - dice_by_loops(&p, &t)).abs() < 1e-12);
            let h = 1e-6;
            for i in 0..p.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (dice_by_loops(&a, &t) - dice_by_loops(&b, &t)) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                prop_assert!(rel <= 1e-3, "voxel {i}: fd {fd} vs analytic {}", grad[i]);
            }
        }

        #[test]
        fn dice_loss_is_bounded_and_permutation_symmetric(
            p in prop::collection::vec(0.0f64..=1.0, 27),
            t in prop::collection::vec(prop::bool::ANY, 27),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let t: Vec<f64> = t.into_iter().map(f64::from).collect();
            let (l, _) = soft_dice_with_grad(&p, &t, DICE_EPS);
            prop_assert!((-1e-12..=1.0 + 1e-4).contains(&l));
            let mut order: Vec<usize> = (0..27).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = order.iter().map(|&i| p[i]).collect();
            let tp: Vec<f64> = order.iter().map(|&i| t[i]).collect();
            prop_assert!((soft_dice_with_grad(&pp, &tp, DICE_EPS).0 - l).abs() < 1e-12);
        }
    }
}
