use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{Element, Tensor};

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// He normal with the given fan-in (ReLU-family activations).
    HeNormal { fan_in: usize },
    /// Glorot uniform over `fan_in + fan_out`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

/// Ordered, named collection of parameters. Registration order is the
/// serialisation order, so models must register deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E = f32> {
    params: Vec<Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::Constant(c) => vec![E::of(c); n],
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| E::of(d.sample(rng))).collect()
            }
            Init::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-limit, limit).expect("valid range");
                (0..n).map(|_| E::of(d.sample(rng))).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| E::of(d.sample(rng))).collect()
            }
        };
        self.push(name.into(), Tensor::from_vec(shape, data))
    }

    pub fn push(&mut self, name: String, value: Tensor<E>) -> ParamId {
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast() })
                .collect(),
        }
    }

    /// Order-sensitive FNV-1a digest over names, shapes and raw values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.as_f64().to_le_bytes());
            }
        }
        h
    }
}
