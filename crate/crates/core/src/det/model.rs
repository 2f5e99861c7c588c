use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DetNetConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::error::Result;
use crate::nn::{Conv, ConvGeom, Element, Graph, GroupNorm, ParamStore, Tensor, Var};

type Rng = ChaCha8Rng;

/// Upper bound on channel groups per normalisation layer.
const MAX_NORM_GROUPS: usize = 8;

/// Convolution, group normalisation, SiLU.
#[derive(Clone, Debug)]
struct ConvSilu {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvSilu {
    fn new(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let conv = Conv::new(store, name, cin, cout, ConvGeom::planar(k, stride, (k - 1) / 2), false, rng);
        let groups = (1..=MAX_NORM_GROUPS).rev().find(|g| cout % g == 0).unwrap_or(1);
        let norm = GroupNorm::new(store, &format!("{name}.norm"), cout, groups, rng);
        Self { conv, norm }
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        g.silu(y)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    cv1: ConvSilu,
    cv2: ConvSilu,
    shortcut: bool,
}

impl Bottleneck {
    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let h = self.cv1.forward(g, x);
        let h = self.cv2.forward(g, h);
        if self.shortcut {
            g.add(x, h)
        } else {
            h
        }
    }
}

/// Cross-stage partial block: half the channels pass through a stack of
/// bottlenecks, the other half bypass it, and a 1x1 conv merges both.
#[derive(Clone, Debug)]
struct Csp {
    cv1: ConvSilu,
    cv2: ConvSilu,
    cv3: ConvSilu,
    blocks: Vec<Bottleneck>,
}

impl Csp {
    fn new(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, depth: usize, shortcut: bool, rng: &mut Rng) -> Self {
        let hidden = cout / 2;
        let cv1 = ConvSilu::new(store, &format!("{name}.cv1"), cin, hidden, 1, 1, rng);
        let cv2 = ConvSilu::new(store, &format!("{name}.cv2"), cin, hidden, 1, 1, rng);
        let blocks = (0..depth)
            .map(|i| Bottleneck {
                cv1: ConvSilu::new(store, &format!("{name}.m{i}.cv1"), hidden, hidden, 1, 1, rng),
                cv2: ConvSilu::new(store, &format!("{name}.m{i}.cv2"), hidden, hidden, 3, 1, rng),
                shortcut,
            })
            .collect();
        let cv3 = ConvSilu::new(store, &format!("{name}.cv3"), 2 * hidden, cout, 1, 1, rng);
        Self { cv1, cv2, cv3, blocks }
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let mut a = self.cv1.forward(g, x);
        for b in &self.blocks {
            a = b.forward(g, a);
        }
        let b = self.cv2.forward(g, x);
        let cat = g.concat(&[a, b], 1);
        self.cv3.forward(g, cat)
    }
}

/// Fast spatial pyramid pooling: three chained 5x5 max-pools.
#[derive(Clone, Debug)]
struct Sppf {
    cv1: ConvSilu,
    cv2: ConvSilu,
}

impl Sppf {
    fn new(store: &mut ParamStore<f32>, name: &str, c: usize, rng: &mut Rng) -> Self {
        let hidden = c / 2;
        Self {
            cv1: ConvSilu::new(store, &format!("{name}.cv1"), c, hidden, 1, 1, rng),
            cv2: ConvSilu::new(store, &format!("{name}.cv2"), 4 * hidden, c, 1, 1, rng),
        }
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let pool = ConvGeom::planar(5, 1, 2);
        let a = self.cv1.forward(g, x);
        let p1 = g.max_pool3d(a, pool);
        let p2 = g.max_pool3d(p1, pool);
        let p3 = g.max_pool3d(p2, pool);
        let cat = g.concat(&[a, p1, p2, p3], 1);
        self.cv2.forward(g, cat)
    }
}

/// Layer layout of the detector; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct DetNet {
    pub config: DetNetConfig,
    stem: ConvSilu,
    down1: ConvSilu,
    stage1: Csp,
    down2: ConvSilu,
    stage2: Csp,
    down3: ConvSilu,
    stage3: Csp,
    down4: ConvSilu,
    stage4: Csp,
    sppf: Sppf,
    lateral5: ConvSilu,
    top_down4: Csp,
    lateral4: ConvSilu,
    out3: Csp,
    bottom_up3: ConvSilu,
    out4: Csp,
    bottom_up4: ConvSilu,
    out5: Csp,
    heads: Vec<Conv>,
}

fn width(c: usize, m: f64) -> usize {
    (((c as f64 * m) / 8.0).ceil() as usize * 8).max(8)
}

fn depth(n: usize, m: f64) -> usize {
    ((n as f64 * m).round() as usize).max(1)
}

impl DetNet {
    pub fn build(config: &DetNetConfig, store: &mut ParamStore<f32>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (wm, dm) = (config.width_multiple, config.depth_multiple);
        let [c1, c2, c3, c4, c5] = [64, 128, 256, 512, 1024].map(|c| width(c, wm));
        let [n3, n6, n9] = [3, 6, 9].map(|n| depth(n, dm));
        let s = store;
        let net = Self {
            config: config.clone(),
            stem: ConvSilu::new(s, "b.stem", 1, c1, 6, 2, rng),
            down1: ConvSilu::new(s, "b.down1", c1, c2, 3, 2, rng),
            stage1: Csp::new(s, "b.stage1", c2, c2, n3, true, rng),
            down2: ConvSilu::new(s, "b.down2", c2, c3, 3, 2, rng),
            stage2: Csp::new(s, "b.stage2", c3, c3, n6, true, rng),
            down3: ConvSilu::new(s, "b.down3", c3, c4, 3, 2, rng),
            stage3: Csp::new(s, "b.stage3", c4, c4, n9, true, rng),
            down4: ConvSilu::new(s, "b.down4", c4, c5, 3, 2, rng),
            stage4: Csp::new(s, "b.stage4", c5, c5, n3, true, rng),
            sppf: Sppf::new(s, "b.sppf", c5, rng),
            lateral5: ConvSilu::new(s, "n.lat5", c5, c4, 1, 1, rng),
            top_down4: Csp::new(s, "n.td4", 2 * c4, c4, n3, false, rng),
            lateral4: ConvSilu::new(s, "n.lat4", c4, c3, 1, 1, rng),
            out3: Csp::new(s, "n.out3", 2 * c3, c3, n3, false, rng),
            bottom_up3: ConvSilu::new(s, "n.bu3", c3, c3, 3, 2, rng),
            out4: Csp::new(s, "n.out4", 2 * c3, c4, n3, false, rng),
            bottom_up4: ConvSilu::new(s, "n.bu4", c4, c4, 3, 2, rng),
            out5: Csp::new(s, "n.out5", 2 * c4, c5, n3, false, rng),
            heads: [c3, c4, c5]
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv::new(s, &format!("h.{i}"), c, config.head_channels(), ConvGeom::planar(1, 1, 0), true, rng))
                .collect(),
        };
        net.init_head_bias(s);
        Ok(net)
    }

    /// Objectness and class priors so an untrained head starts quiet.
    fn init_head_bias(&self, store: &mut ParamStore<f32>) {
        let per = self.config.outputs_per_anchor();
        let nc = self.config.class_count as f64;
        for (head, &stride) in self.heads.iter().zip(&STRIDES) {
            let cells = (self.config.input_size as f64 / stride as f64).powi(2);
            let obj = (8.0 / cells).ln() as f32;
            let cls = (0.6 / (nc - 0.99)).ln() as f32;
            let b = store.get_mut(head.bias.expect("head convs carry a bias")).data_mut();
            for a in 0..ANCHORS_PER_SCALE {
                b[a * per + 4] = obj;
                for c in 5..per {
                    b[a * per + c] = cls;
                }
            }
        }
    }

    /// Raw head outputs `[B, 3 * (5 + classes), 1, g, g]`, finest first.
    /// Input is `[B, 1, 1, S, S]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> [Var; 3] {
        let h = self.stem.forward(g, x);
        let h = self.down1.forward(g, h);
        let h = self.stage1.forward(g, h);
        let h = self.down2.forward(g, h);
        let p3 = self.stage2.forward(g, h);
        let h = self.down3.forward(g, p3);
        let p4 = self.stage3.forward(g, h);
        let h = self.down4.forward(g, p4);
        let h = self.stage4.forward(g, h);
        let p5 = self.sppf.forward(g, h);

        let l5 = self.lateral5.forward(g, p5);
        let up = g.upsample_nearest(l5, [1, 2, 2]);
        let cat = g.concat(&[up, p4], 1);
        let t4 = self.top_down4.forward(g, cat);
        let l4 = self.lateral4.forward(g, t4);
        let up = g.upsample_nearest(l4, [1, 2, 2]);
        let cat = g.concat(&[up, p3], 1);
        let o3 = self.out3.forward(g, cat);

        let d = self.bottom_up3.forward(g, o3);
        let cat = g.concat(&[d, l4], 1);
        let o4 = self.out4.forward(g, cat);
        let d = self.bottom_up4.forward(g, o4);
        let cat = g.concat(&[d, l5], 1);
        let o5 = self.out5.forward(g, cat);

        let feats = [o3, o4, o5];
        std::array::from_fn(|i| self.heads[i].forward(g, feats[i]))
    }
}

/// Detector layout plus parameters.
#[derive(Clone, Debug)]
pub struct DetModel {
    pub net: DetNet,
    pub params: ParamStore<f32>,
}

impl DetModel {
    pub fn new(config: &DetNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = DetNet::build(config, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &DetNetConfig {
        &self.net.config
    }

    /// Raw head tensors for a batch of input-sized images (row-major
    /// `S x S` each).
    pub fn raw_outputs(&self, images: &[&[f32]]) -> [Tensor<f32>; 3] {
        let s = self.config().input_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for im in images {
            assert_eq!(im.len(), s * s, "image must be letterboxed to the input size");
            data.extend_from_slice(im);
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(Tensor::from_vec(&[images.len(), 1, 1, s, s], data));
        let out = self.net.forward(&mut g, x);
        out.map(|v| g.value(v).clone())
    }
}
