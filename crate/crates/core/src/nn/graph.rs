//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order, so the backward sweep walks the tape in
//! reverse. Parameters are pulled from a borrowed [`ParamStore`] and
//! memoised per graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, strides, Element, Mat, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackCtx<'a, E> {
    pub grad: &'a Tensor<E>,
    pub inputs: Vec<&'a Tensor<E>>,
    pub output: &'a Tensor<E>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<E> = Box<dyn Fn(&BackCtx<'_, E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E> {
    value: Tensor<E>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
    requires_grad: bool,
}

pub struct Graph<'s, E: Element = f32> {
    store: &'s ParamStore<E>,
    nodes: Vec<Node<E>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
    dropout: bool,
    rng: ChaCha8Rng,
}

impl<'s, E: Element> Graph<'s, E> {
    /// Forward-only graph: no backward closures are kept, dropout is off.
    pub fn inference(store: &'s ParamStore<E>) -> Self {
        Self::build(store, false, false, 0)
    }

    /// Recording graph with dropout active, seeded for reproducibility.
    pub fn training(store: &'s ParamStore<E>, seed: u64) -> Self {
        Self::build(store, true, true, seed)
    }

    /// Recording graph without stochastic layers (gradient checks).
    pub fn recording(store: &'s ParamStore<E>) -> Self {
        Self::build(store, true, false, 0)
    }

    fn build(store: &'s ParamStore<E>, record: bool, dropout: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            record,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        let rg = self.record;
        self.leaf(value, rg)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let rg = self.record;
        let v = self.leaf(value, rg);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, parents: &[Var], backward: BackwardFn<E>) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<E> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), E::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let pgrads = bw(&ctx);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = E::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = E::of(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > E::zero() { x } else { E::zero() });
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > E::zero() { g } else { E::zero() }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y * (E::one() - y)))]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(
            out,
            &[a],
            Box::new(|c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                    let s = sigmoid(x);
                    g * s * (E::one() + x * (E::one() - s))
                }))]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * gelu_grad(x)))]))
    }

    /// Inverted dropout; identity unless the graph is in training mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.dropout || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let scale = E::of(1.0 / keep);
        let mask: Vec<E> = {
            let rng = self.rng();
            (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { E::zero() }).collect()
        };
        let mask = Tensor::from_vec(self.shape(a), mask);
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.zip_map(&mask, |g, m| g * m))]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, t),
                None => t,
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(E::zero())))
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, &[a], Box::new(|c| vec![Some(c.grad.clone().reshaped(c.inputs[0].shape()))]))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = permute_tensor(self.value(a), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(out, &[a], Box::new(move |c| vec![Some(permute_tensor(c.grad, &inverse))]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                assert!(
                    s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                    "concat shape mismatch {s:?} vs {first:?}"
                );
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, data);
        self.push(
            out,
            parts,
            Box::new(move |c| {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &sz)| {
                        let start = offset;
                        offset += sz;
                        if !c.needs[k] {
                            return None;
                        }
                        let mut g = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            g.extend_from_slice(&c.grad.data()[base..base + sz * inner]);
                        }
                        Some(Tensor::from_vec(c.inputs[k].shape(), g))
                    })
                    .collect()
            }),
        )
    }

    /// Picks flat element indices into a 1-d tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a).data();
        let data: Vec<E> = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(&[indices.len()], data);
        let idx = indices.to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                let gd = g.data_mut();
                for (&i, &v) in idx.iter().zip(c.grad.data()) {
                    gd[i] += v;
                }
                vec![Some(g)]
            }),
        )
    }

    // ---- dense algebra ----------------------------------------------------

    /// `x [.., K] * w [K, N] + b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (kd, n) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(*xs.last().expect("rank >= 1"), kd, "linear input width mismatch");
        let m = self.value(x).len() / kd;
        let mut out = vec![E::zero(); m * n];
        matmul_into(Mat::new(self.value(x).data(), m, kd), Mat::new(self.value(w).data(), kd, n), &mut out, E::zero());
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n);
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = n;
        let out = Tensor::from_vec(&shape, out);
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(
            out,
            &parents,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut res = Vec::with_capacity(3);
                res.push(c.needs[0].then(|| {
                    let mut dx = vec![E::zero(); m * kd];
                    matmul_into(Mat::new(g, m, n), Mat::new(c.inputs[1].data(), kd, n).t(), &mut dx, E::zero());
                    Tensor::from_vec(c.inputs[0].shape(), dx)
                }));
                res.push(c.needs[1].then(|| {
                    let mut dw = vec![E::zero(); kd * n];
                    matmul_into(Mat::new(c.inputs[0].data(), m, kd).t(), Mat::new(g, m, n), &mut dw, E::zero());
                    Tensor::from_vec(&[kd, n], dw)
                }));
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut db = vec![E::zero(); n];
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_vec(&[n], db)
                    }));
                }
                res
            }),
        )
    }

    /// Batched matmul `a [B, M, K] * b [B, K, N]`, or `a * b^T` with `b [B, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm expects matching 3-d operands");
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        assert_eq!(if transpose_b { sb[2] } else { sb[1] }, k, "bmm inner dimension mismatch");
        let mut out = vec![E::zero(); bt * m * n];
        for i in 0..bt {
            let am = Mat::new(&self.value(a).data()[i * m * k..(i + 1) * m * k], m, k);
            let bm = bmat(&self.value(b).data()[i * k * n..(i + 1) * k * n], k, n, transpose_b);
            matmul_into(am, bm, &mut out[i * m * n..(i + 1) * m * n], E::zero());
        }
        let out = Tensor::from_vec(&[bt, m, n], out);
        self.push(
            out,
            &[a, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let da = c.needs[0].then(|| {
                    let mut da = vec![E::zero(); bt * m * k];
                    for i in 0..bt {
                        let gm = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bm = bmat(&c.inputs[1].data()[i * k * n..(i + 1) * k * n], k, n, transpose_b);
                        matmul_into(gm, bm.t(), &mut da[i * m * k..(i + 1) * m * k], E::zero());
                    }
                    Tensor::from_vec(&[bt, m, k], da)
                });
                let db = c.needs[1].then(|| {
                    let mut db = vec![E::zero(); bt * k * n];
                    for i in 0..bt {
                        let gm = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = Mat::new(&c.inputs[0].data()[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            // d(b^T) = a^T g  =>  db = g^T a, shape [N, K]
                            matmul_into(gm.t(), am, dst, E::zero());
                        } else {
                            matmul_into(am.t(), gm, dst, E::zero());
                        }
                    }
                    Tensor::from_vec(c.inputs[1].shape(), db)
                });
                vec![da, db]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().expect("rank >= 1");
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(
            out,
            &[a],
            Box::new(move |c| {
                let mut dx = c.grad.clone();
                for (gr, yr) in dx.data_mut().chunks_mut(d).zip(c.output.data().chunks(d)) {
                    let dot: E = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for (g, &y) in gr.iter_mut().zip(yr) {
                        *g = y * (*g - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn bmat<E: Element>(data: &[E], k: usize, n: usize, transposed: bool) -> Mat<'_, E> {
    if transposed {
        Mat::new(data, n, k).t()
    } else {
        Mat::new(data, k, n)
    }
}

pub(crate) fn softmax_in_place<E: Element>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut total = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[inline]
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<E: Element>(x: E) -> E {
    let c = E::of(GELU_C);
    let k = E::of(0.044715);
    E::of(0.5) * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::of(GELU_C);
    let k = E::of(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + E::of(3.0) * k * x * x);
    E::of(0.5) * (E::one() + t) + E::of(0.5) * x * (E::one() - t * t) * du
}

pub(crate) fn permute_tensor<E: Element>(t: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let shape = t.shape();
    assert_eq!(axes.len(), shape.len(), "permute rank mismatch");
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return t.clone();
    }
    let mut idx = vec![0usize; rank];
    let src = t.data();
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(src[offset]);
        // odometer increment over output coordinates
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, data)
}

/// Result of a backward sweep.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
    param_vars: Vec<Option<Var>>,
}

impl<E: Element> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.param_vars.get(id.0).copied().flatten().and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradients for every parameter touched by the forward pass.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.grads[v.0].take() {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}
