use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};

/// Normalises `rows` groups of `len` contiguous values; returns (xhat, inv_std).
fn normalize_groups<E: Element>(x: &[E], len: usize, eps: E) -> (Vec<E>, Vec<E>) {
    let groups = x.len() / len;
    let mut xhat = vec![E::zero(); x.len()];
    let mut inv = vec![E::zero(); groups];
    let n = E::of(len as f64);
    for gi in 0..groups {
        let src = &x[gi * len..(gi + 1) * len];
        let mean = src.iter().copied().sum::<E>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let is = E::one() / (var + eps).sqrt();
        inv[gi] = is;
        for (o, &v) in xhat[gi * len..(gi + 1) * len].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

/// Backward of per-group normalisation given the gradient w.r.t. xhat.
fn normalize_backward<E: Element>(dxhat: &[E], xhat: &[E], inv: &[E], len: usize) -> Vec<E> {
    let n = E::of(len as f64);
    let mut dx = vec![E::zero(); dxhat.len()];
    for (gi, &is) in inv.iter().enumerate() {
        let r = gi * len..(gi + 1) * len;
        let (dh, xh) = (&dxhat[r.clone()], &xhat[r.clone()]);
        let sum_d: E = dh.iter().copied().sum();
        let sum_dx: E = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((o, &d), &h) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = is / n * (n * d - sum_d - h * sum_dx);
        }
    }
    dx
}

impl<'s, E: Element> Graph<'s, E> {
    /// Per-sample, per-channel normalisation over all spatial positions of
    /// `[B, C, ...]`, followed by a channel affine transform.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let ch = self.shape(x)[1];
        self.group_norm(x, gamma, beta, ch, eps)
    }

    /// Per-sample normalisation over `groups` contiguous channel groups of
    /// `[B, C, ...]` (all their spatial positions), followed by a channel
    /// affine transform.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let (bt, ch) = (shape[0], shape[1]);
        assert!(groups > 0 && ch % groups == 0, "{ch} channels do not split into {groups} groups");
        let spatial: usize = shape[2..].iter().product();
        let group_len = ch / groups * spatial;
        let (xhat, inv) = normalize_groups(self.value(x).data(), group_len, E::of(eps));
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        assert_eq!(gd.len(), ch);
        let mut y = xhat.clone();
        for plane in 0..bt * ch {
            let c = plane % ch;
            for v in &mut y[plane * spatial..(plane + 1) * spatial] {
                *v = *v * gd[c] + bd[c];
            }
        }
        let out = Tensor::from_vec(&shape, y);
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let g = c.grad.data();
                let gd = c.inputs[1].data();
                let dx = c.needs[0].then(|| {
                    let mut dxhat = g.to_vec();
                    for plane in 0..bt * ch {
                        let gm = gd[plane % ch];
                        for v in &mut dxhat[plane * spatial..(plane + 1) * spatial] {
                            *v *= gm;
                        }
                    }
                    Tensor::from_vec(c.inputs[0].shape(), normalize_backward(&dxhat, &xhat, &inv, group_len))
                });
                let mut dgamma = vec![E::zero(); ch];
                let mut dbeta = vec![E::zero(); ch];
                for plane in 0..bt * ch {
                    let r = plane * spatial..(plane + 1) * spatial;
                    dgamma[plane % ch] += g[r.clone()].iter().zip(&xhat[r.clone()]).map(|(&a, &b)| a * b).sum::<E>();
                    dbeta[plane % ch] += g[r].iter().copied().sum::<E>();
                }
                vec![dx, Some(Tensor::from_vec(&[ch], dgamma)), Some(Tensor::from_vec(&[ch], dbeta))]
            }),
        )
    }

    /// Normalisation over the last axis with an elementwise affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let (xhat, inv) = normalize_groups(self.value(x).data(), d, E::of(eps));
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        assert_eq!(gd.len(), d);
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for ((v, &gm), &bt) in row.iter_mut().zip(gd).zip(bd) {
                *v = *v * gm + bt;
            }
        }
        let out = Tensor::from_vec(&shape, y);
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let g = c.grad.data();
                let gd = c.inputs[1].data();
                let dx = c.needs[0].then(|| {
                    let mut dxhat = g.to_vec();
                    for row in dxhat.chunks_mut(d) {
                        for (v, &gm) in row.iter_mut().zip(gd) {
                            *v *= gm;
                        }
                    }
                    Tensor::from_vec(c.inputs[0].shape(), normalize_backward(&dxhat, &xhat, &inv, d))
                });
                let mut dgamma = vec![E::zero(); d];
                let mut dbeta = vec![E::zero(); d];
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        dgamma[i] += grow[i] * hrow[i];
                        dbeta[i] += grow[i];
                    }
                }
                vec![dx, Some(Tensor::from_vec(&[d], dgamma)), Some(Tensor::from_vec(&[d], dbeta))]
            }),
        )
    }
}
