//! Parameterised building blocks shared by the three networks.

use rand::Rng;

use super::conv::ConvGeom;
use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Element;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let taps: usize = geom.kernel.iter().product();
        let k = geom.kernel;
        let weight = store.add(format!("{name}.weight"), &[cout, cin, k[0], k[1], k[2]], Init::HeNormal { fan_in: cin * taps }, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng));
        Self { weight, bias, geom }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv3d(x, w, b, self.geom)
    }
}

/// Transposed convolution with kernel equal to stride.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, cin: usize, cout: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[cin, cout, kernel[0], kernel[1], kernel[2]],
            Init::HeNormal { fan_in: cin },
            rng,
        );
        let bias = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { weight, bias }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose3d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[channels], Init::Zeros, rng),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.instance_norm(x, gm, bt, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize, groups: usize, rng: &mut impl Rng) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels do not split into {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[channels], Init::Zeros, rng),
            groups,
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, Self::EPS)
    }
}

/// Dense layer `x W + b` with Glorot-uniform weights `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[fan_in, fan_out], Init::GlorotUniform { fan_in, fan_out }, rng),
            bias: store.add(format!("{name}.bias"), &[fan_out], Init::Zeros, rng),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}
