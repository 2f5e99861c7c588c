use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{patchify, ClassifierOutput, ViTConfig};
use crate::error::{Error, Result};
use crate::nn::{Element, Graph, Init, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
        }
    }

    /// `[B, T, D] -> [B*H, T, D/H]`
    fn split_heads<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let r = g.reshape(x, &[b, t, self.heads, dh]);
        let p = g.permute(r, &[0, 2, 1, 3]);
        g.reshape(p, &[b * self.heads, t, dh])
    }

    /// Self-attention over `[B, T, D]`; the softmax weights `[B*H, T, T]`
    /// are pushed to `attention` when given.
    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var, attention: Option<&mut Vec<Var>>) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let (q, k, v) = (self.split_heads(g, q), self.split_heads(g, k), self.split_heads(g, v));
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores);
        if let Some(a) = attention {
            a.push(weights);
        }
        let ctx = g.bmm(weights, v, false);
        let ctx = g.reshape(ctx, &[b, self.heads, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, t, d]);
        self.output.forward(g, ctx)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    attention: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Vec<Linear>,
    mlp_out: Option<Linear>,
}

impl EncoderBlock {
    fn new<E: Element>(store: &mut ParamStore<E>, name: &str, config: &ViTConfig, rng: &mut impl Rng) -> Self {
        let d = config.projection_dim;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d, rng);
        let attention = MultiHeadAttention::new(store, &format!("{name}.attn"), d, config.attention_heads, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d, rng);
        let mut mlp = Vec::new();
        let mut width = d;
        for (i, &h) in config.mlp_hidden.iter().enumerate() {
            mlp.push(Linear::new(store, &format!("{name}.mlp{i}"), width, h, rng));
            width = h;
        }
        let mlp_out = (width != d).then(|| Linear::new(store, &format!("{name}.mlp_out"), width, d, rng));
        Self { norm1, attention, norm2, mlp, mlp_out }
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var, dropout: f64, attention: Option<&mut Vec<Var>>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = self.attention.forward(g, h, attention);
        let x = g.add(x, h);
        let mut h = self.norm2.forward(g, x);
        for layer in &self.mlp {
            h = layer.forward(g, h);
            h = g.gelu(h);
            h = g.dropout(h, dropout);
        }
        if let Some(out) = &self.mlp_out {
            h = out.forward(g, h);
        }
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct ViT {
    pub config: ViTConfig,
    tokens: usize,
    embed: Linear,
    position: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Vec<Linear>,
    classifier: Linear,
}

impl ViT {
    pub fn build<E: Element>(config: &ViTConfig, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_tokens(config, config.token_count(), store, rng))
    }

    /// Network over an arbitrary token count, for toy configurations whose
    /// sequence is not a square grid of patches.
    pub(crate) fn with_tokens<E: Element>(config: &ViTConfig, tokens: usize, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Self {
        let d = config.projection_dim;
        let embed = Linear::new(store, "embed", config.patch_len(), d, rng);
        let position = store.add("position", &[1, tokens, d], Init::Normal { std: 0.02 }, rng);
        let blocks = (0..config.encoder_blocks).map(|i| EncoderBlock::new(store, &format!("block{i}"), config, rng)).collect();
        let norm = LayerNorm::new(store, "norm", d, rng);
        let mut head = Vec::new();
        let mut width = tokens * d;
        for (i, &h) in config.head_hidden.iter().enumerate() {
            head.push(Linear::new(store, &format!("head{i}"), width, h, rng));
            width = h;
        }
        let classifier = Linear::new(store, "classifier", width, config.class_count, rng);
        Self { config: config.clone(), tokens, embed, position, blocks, norm, head, classifier }
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position
    }

    /// Token sequence `[B, T, P]` -> normalised token features `[B, T, D]`.
    pub fn encode<E: Element>(&self, g: &mut Graph<'_, E>, tokens: Var, mut attention: Option<&mut Vec<Var>>) -> Var {
        let b = g.shape(tokens)[0];
        let x = self.embed.forward(g, tokens);
        let pos = g.param(self.position);
        let pos = if b == 1 { pos } else { g.concat(&vec![pos; b], 0) };
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, x, self.config.dropout, attention.as_deref_mut());
        }
        self.norm.forward(g, x)
    }

    /// Token sequence `[B, T, P]` -> class logits `[B, C]`.
    pub fn logits<E: Element>(&self, g: &mut Graph<'_, E>, tokens: Var) -> Var {
        let b = g.shape(tokens)[0];
        let x = self.encode(g, tokens, None);
        let mut h = g.reshape(x, &[b, self.tokens * self.config.projection_dim]);
        for layer in &self.head {
            h = layer.forward(g, h);
            h = g.gelu(h);
            h = g.dropout(h, self.config.dropout);
        }
        self.classifier.forward(g, h)
    }

    /// Softmax class probabilities `[B, C]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, tokens: Var) -> Var {
        let z = self.logits(g, tokens);
        g.softmax(z)
    }
}

/// A built classifier together with its weights.
#[derive(Clone, Debug)]
pub struct ViTModel {
    pub net: ViT,
    pub params: ParamStore<f32>,
}

impl ViTModel {
    pub fn new(config: &ViTConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ViT::build(config, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.net.config
    }

    /// Patchified batch as a `[B, T, P]` tensor.
    pub(crate) fn tokens(&self, images: &[&Array2<f32>]) -> Result<Tensor<f32>> {
        let c = self.config();
        let mut data = Vec::with_capacity(images.len() * c.token_count() * c.patch_len());
        for img in images {
            if img.dim() != (c.image_size, c.image_size) {
                return Err(Error::ShapeMismatch(format!("classifier expects {0}x{0} patches, got {1:?}", c.image_size, img.dim())));
            }
            data.extend(patchify(img, c.patch_size)?.iter().copied());
        }
        Ok(Tensor::from_vec(&[images.len(), c.token_count(), c.patch_len()], data))
    }

    /// Deterministic outputs for a batch of patches.
    pub fn predict(&self, images: &[&Array2<f32>]) -> Result<Vec<ClassifierOutput>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.tokens(images)?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(t);
        let z = self.net.logits(&mut g, x);
        let k = self.config().class_count;
        Ok(g.value(z).data().chunks(k).map(|row| ClassifierOutput::from_logits(row.iter().map(|&v| f64::from(v)).collect())).collect())
    }

    /// Softmax attention maps `[H, T, T]` of every encoder block for one patch.
    pub fn attention_maps(&self, image: &Array2<f32>) -> Result<Vec<Tensor<f32>>> {
        let t = self.tokens(&[image])?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(t);
        let mut maps = Vec::new();
        self.net.encode(&mut g, x, Some(&mut maps));
        Ok(maps.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            projection_dim: 8,
            encoder_blocks: 2,
            attention_heads: 2,
            mlp_hidden: vec![8, 16],
            head_hidden: vec![16, 8],
            class_count: 2,
            dropout: 0.1,
        }
    }

    fn random_image(side: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((side, side), |_| rng.random::<f32>())
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        let c = ViTConfig::default();
        let m = ViTModel::new(&c, 0).unwrap();
        let dense = |i: usize, o: usize| i * o + o;
        let d = 64;
        let block = 2 * 2 * d + 4 * dense(d, d) + dense(d, 64) + dense(64, 128) + dense(128, d);
        let expected = dense(64, d) + 64 * d + 8 * block + 2 * d + dense(64 * d, 2048) + dense(2048, 1024) + dense(1024, 2);
        assert_eq!(m.params.numel(), expected);
    }

    #[test]
    fn output_shape_and_attention_rows() {
        let m = ViTModel::new(&toy(), 3).unwrap();
        let imgs: Vec<Array2<f32>> = (0..3).map(|s| random_image(8, s)).collect();
        let refs: Vec<&Array2<f32>> = imgs.iter().collect();
        let out = m.predict(&refs).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.probabilities.len() == 2));
        let maps = m.attention_maps(&imgs[0]).unwrap();
        assert_eq!(maps.len(), 2);
        for a in &maps {
            assert_eq!(a.shape(), &[2, 4, 4]);
            for row in a.data().chunks(4) {
                assert!((row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(m.predict(&[&Array2::zeros((9, 9))]).is_err());
    }

    #[test]
    fn batch_composition_does_not_leak() {
        let m = ViTModel::new(&toy(), 5).unwrap();
        let imgs: Vec<Array2<f32>> = (0..4).map(|s| random_image(8, 10 + s)).collect();
        let alone = m.predict(&[&imgs[2]]).unwrap();
        let together = m.predict(&imgs.iter().collect::<Vec<_>>()).unwrap();
        for (p, q) in alone[0].probabilities.iter().zip(&together[2].probabilities) {
            assert!((p - q).abs() < 1e-5);
        }
        assert_eq!(m.predict(&[&imgs[1], &imgs[1]]).unwrap()[0], m.predict(&[&imgs[1], &imgs[1]]).unwrap()[1]);
    }

    fn encode_tokens(m: &ViTModel, tokens: Vec<f32>) -> Vec<f32> {
        let c = m.config();
        let mut g = Graph::inference(&m.params);
        let x = g.input(Tensor::from_vec(&[1, c.token_count(), c.patch_len()], tokens));
        let e = m.net.encode(&mut g, x, None);
        g.value(e).data().to_vec()
    }

    #[test]
    fn token_permutation_equivariance_needs_zero_positions() {
        let mut m = ViTModel::new(&toy(), 7).unwrap();
        let (t, p, d) = (4, 16, 8);
        let tokens: Vec<f32> = random_image(8, 1).iter().copied().collect();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| tokens[i * p..(i + 1) * p].to_vec()).collect();

        let base = encode_tokens(&m, tokens.clone());
        let moved = encode_tokens(&m, permuted.clone());
        let max_diff = |a: &[f32], b: &[f32]| {
            (0..t).flat_map(|k| (0..d).map(move |j| (k, j))).map(|(k, j)| (a[perm[k] * d + j] - b[k * d + j]).abs()).fold(0.0f32, f32::max)
        };
        assert!(max_diff(&base, &moved) > 1e-4);

        m.params.get_mut(m.net.position_embedding()).data_mut().fill(0.0);
        let base = encode_tokens(&m, tokens);
        let moved = encode_tokens(&m, permuted);
        assert!(max_diff(&base, &moved) < 1e-5);
    }
}
