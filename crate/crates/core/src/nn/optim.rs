use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{Element, Tensor};

/// Adam hyper-parameters; defaults follow the usual `(0.9, 0.999, 1e-8)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
pub struct Adam<E> {
    config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<E>>>,
    v: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[(ParamId, Tensor<E>)]) {
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (E::of(c.beta1), E::of(c.beta2));
        let (one_b1, one_b2) = (E::of(1.0 - c.beta1), E::of(1.0 - c.beta2));
        let step_size = E::of(c.learning_rate / bc1);
        let inv_bc2 = E::of(1.0 / bc2);
        let eps = E::of(c.eps);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}
