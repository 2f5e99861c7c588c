//! Fused loss operators with closed-form gradients.

use super::graph::{sigmoid, softmax_in_place, Graph, Var};
use super::tensor::{Element, Tensor};

/// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` and its
/// gradient with respect to `pred`.
pub fn soft_dice_with_grad<E: Element>(pred: &[E], target: &[E], eps: E) -> (E, Vec<E>) {
    assert_eq!(pred.len(), target.len(), "dice operands differ in length");
    let inter: E = pred.iter().zip(target).map(|(&p, &g)| p * g).sum();
    let sp: E = pred.iter().copied().sum();
    let sg: E = target.iter().copied().sum();
    let two = E::of(2.0);
    let num = two * inter + eps;
    let den = sp + sg + eps;
    let loss = E::one() - num / den;
    // d/dp_i [num/den] = (2 g_i den - num) / den^2
    let grad = target.iter().map(|&g| -(two * g * den - num) / (den * den)).collect();
    (loss, grad)
}

/// Generalized IoU of two boxes given as `(cx, cy, w, h)` and the gradient
/// of the GIoU with respect to the first box.
pub fn giou_with_grad<E: Element>(p: [E; 4], t: [E; 4]) -> (E, [E; 4]) {
    let half = E::of(0.5);
    let z = E::zero();
    let one = E::one();
    let (px1, px2, py1, py2) = (p[0] - p[2] * half, p[0] + p[2] * half, p[1] - p[3] * half, p[1] + p[3] * half);
    let (tx1, tx2, ty1, ty2) = (t[0] - t[2] * half, t[0] + t[2] * half, t[1] - t[3] * half, t[1] + t[3] * half);

    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(z), ih_raw.max(z));
    let inter = iw * ih;
    let (pw, ph) = (px2 - px1, py2 - py1);
    let union = pw * ph + (tx2 - tx1) * (ty2 - ty1) - inter;
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let c = cw * ch;
    let giou = inter / union - (c - union) / c;

    // partials w.r.t. (x1, x2, y1, y2) of the predicted box
    let active_w = iw_raw > z;
    let active_h = ih_raw > z;
    let d_iw = [
        if active_w && px1 > tx1 { -one } else { z },
        if active_w && px2 < tx2 { one } else { z },
        z,
        z,
    ];
    let d_ih = [
        z,
        z,
        if active_h && py1 > ty1 { -one } else { z },
        if active_h && py2 < ty2 { one } else { z },
    ];
    let d_area = [-ph, ph, -pw, pw];
    let d_cw = [if px1 < tx1 { -one } else { z }, if px2 > tx2 { one } else { z }, z, z];
    let d_ch = [z, z, if py1 < ty1 { -one } else { z }, if py2 > ty2 { one } else { z }];
    let mut dg = [z; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area[k] - d_inter;
        let d_c = d_cw[k] * ch + cw * d_ch[k];
        dg[k] = (d_inter * union - inter * d_union) / (union * union) + (d_union * c - union * d_c) / (c * c);
    }
    // x1 = cx - w/2, x2 = cx + w/2
    let grad = [dg[0] + dg[1], dg[2] + dg[3], (dg[1] - dg[0]) * half, (dg[3] - dg[2]) * half];
    (giou, grad)
}

/// Numerically stable `max(x,0) - x t + log(1 + exp(-|x|))`.
#[inline]
pub fn bce_logit<E: Element>(x: E, t: E) -> E {
    x.max(E::zero()) - x * t + (E::one() + (-x.abs()).exp()).ln()
}

impl<'s, E: Element> Graph<'s, E> {
    /// Mean over the batch of per-sample soft Dice loss; `pred` holds
    /// probabilities `[B, ...]`, `target` the binary reference.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<E>, eps: f64) -> Var {
        let shape = self.shape(pred).to_vec();
        assert_eq!(shape.as_slice(), target.shape(), "dice shape mismatch");
        let bt = shape[0];
        let per = target.len() / bt;
        let eps = E::of(eps);
        let p = self.value(pred).data();
        let mut total = E::zero();
        let mut grad = Vec::with_capacity(p.len());
        let inv_b = E::one() / E::of(bt as f64);
        for s in 0..bt {
            let (l, g) = soft_dice_with_grad(&p[s * per..(s + 1) * per], &target.data()[s * per..(s + 1) * per], eps);
            total += l;
            grad.extend(g.into_iter().map(|v| v * inv_b));
        }
        let grad = Tensor::from_vec(&shape, grad);
        self.push(
            Tensor::scalar(total * inv_b),
            &[pred],
            Box::new(move |c| {
                let s = c.grad.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        )
    }

    /// `sum(w * bce(sigmoid(x), t)) / normalizer`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<E>, weights: &Tensor<E>, normalizer: f64) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        assert_eq!(x.shape(), weights.shape());
        let norm = E::of(normalizer);
        let mut total = E::zero();
        let mut grad = Vec::with_capacity(x.len());
        for ((&xv, &tv), &wv) in x.data().iter().zip(targets.data()).zip(weights.data()) {
            if wv == E::zero() {
                grad.push(E::zero());
                continue;
            }
            total += wv * bce_logit(xv, tv);
            grad.push(wv * (sigmoid(xv) - tv) / norm);
        }
        let grad = Tensor::from_vec(x.shape(), grad);
        self.push(
            Tensor::scalar(total / norm),
            &[logits],
            Box::new(move |c| {
                let s = c.grad.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        )
    }

    /// Mean categorical cross-entropy of `logits [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2);
        let (bt, nc) = (shape[0], shape[1]);
        assert_eq!(labels.len(), bt, "one label per row");
        let mut probs = self.value(logits).clone();
        let mut total = E::zero();
        for (row, &y) in probs.data_mut().chunks_mut(nc).zip(labels) {
            assert!(y < nc, "label {y} out of range");
            softmax_in_place(row);
            total -= row[y].max(E::min_positive_value()).ln();
        }
        let inv_b = E::one() / E::of(bt as f64);
        let mut grad = probs;
        for (row, &y) in grad.data_mut().chunks_mut(nc).zip(labels) {
            row[y] -= E::one();
            for v in row.iter_mut() {
                *v *= inv_b;
            }
        }
        self.push(
            Tensor::scalar(total * inv_b),
            &[logits],
            Box::new(move |c| {
                let s = c.grad.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        )
    }

    /// `mean(1 - GIoU)` between predicted boxes `[N, 4]` and fixed targets,
    /// both `(cx, cy, w, h)`.
    pub fn giou_loss(&mut self, pred: Var, target: &Tensor<E>) -> Var {
        let shape = self.shape(pred).to_vec();
        assert_eq!(shape.as_slice(), target.shape());
        assert_eq!(shape.len(), 2);
        assert_eq!(shape[1], 4);
        let n = shape[0];
        let p = self.value(pred).data();
        let mut total = E::zero();
        let mut grad = Vec::with_capacity(4 * n);
        let inv = E::one() / E::of(n.max(1) as f64);
        for i in 0..n {
            let pb = [p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3]];
            let t = target.data();
            let tb = [t[4 * i], t[4 * i + 1], t[4 * i + 2], t[4 * i + 3]];
            let (gi, dg) = giou_with_grad(pb, tb);
            total += E::one() - gi;
            grad.extend(dg.iter().map(|&v| -v * inv));
        }
        let grad = Tensor::from_vec(&shape, grad);
        self.push(
            Tensor::scalar(total * inv),
            &[pred],
            Box::new(move |c| {
                let s = c.grad.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        )
    }
}
