//! Anchor transform, target assignment, decoding and the detection loss.
//!
//! For a cell `(i, j)` at stride `s` with anchor `(aw, ah)`, raw outputs
//! `(tx, ty, tw, th)` decode to pixel boxes as
//!
//! ```text
//! cx = (i + 2 sigmoid(tx) - 0.5) * s      w = aw * (2 sigmoid(tw))^2
//! cy = (j + 2 sigmoid(ty) - 0.5) * s      h = ah * (2 sigmoid(th))^2
//! ```
//!
//! so centres reach half a cell beyond their own cell (needed for the
//! neighbour-cell assignment) and sizes stay within `(0, 4)` anchors.

use serde::{Deserialize, Serialize};

use super::{DetNetConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::boxes::{BBox, Detection2D, LabeledBox};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Element, Graph, Tensor, Var};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pixel box from raw `(tx, ty, tw, th)`.
pub fn decode_box(raw: [f64; 4], cell: [usize; 2], anchor: [f64; 2], stride: usize) -> BBox {
    let s = stride as f64;
    let sg = raw.map(sigmoid);
    BBox::new(
        (cell[0] as f64 + 2.0 * sg[0] - 0.5) * s,
        (cell[1] as f64 + 2.0 * sg[1] - 0.5) * s,
        anchor[0] * (2.0 * sg[2]).powi(2),
        anchor[1] * (2.0 * sg[3]).powi(2),
    )
}

/// Raw outputs that decode to `target` (pixels). Defined when the centre
/// lies within half a cell of `cell` and each side is under four anchors.
pub fn encode_box(target: &BBox, cell: [usize; 2], anchor: [f64; 2], stride: usize) -> Option<[f64; 4]> {
    let s = stride as f64;
    let ox = (target.cx / s - cell[0] as f64 + 0.5) / 2.0;
    let oy = (target.cy / s - cell[1] as f64 + 0.5) / 2.0;
    let rw = (target.w / anchor[0]).sqrt() / 2.0;
    let rh = (target.h / anchor[1]).sqrt() / 2.0;
    let open = |v: f64| v > 0.0 && v < 1.0;
    (open(ox) && open(oy) && open(rw) && open(rh)).then(|| [logit(ox), logit(oy), logit(rw), logit(rh)])
}

/// A ground-truth box assigned to one anchor of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub batch: usize,
    pub scale: usize,
    pub anchor: usize,
    /// `(x, y)` cell index.
    pub cell: [usize; 2],
    /// Target box in input pixels.
    pub target: BBox,
    pub class_id: usize,
}

/// Match every label (normalised to the network input) to anchors whose
/// side ratios stay below the configured limit, on its own cell and the
/// two neighbouring cells nearest to its centre.
pub fn assign_targets(config: &DetNetConfig, labels: &[Vec<LabeledBox>]) -> Vec<Assignment> {
    let size = config.input_size as f64;
    let mut out = Vec::new();
    for (scale, &stride) in STRIDES.iter().enumerate() {
        let grid = config.input_size / stride;
        let s = stride as f64;
        for (b, boxes) in labels.iter().enumerate() {
            for lb in boxes {
                let t = lb.bbox.scaled(size, size);
                if t.w <= 0.0 || t.h <= 0.0 {
                    continue;
                }
                let (gx, gy) = (t.cx / s, t.cy / s);
                let (ix, iy) = ((gx.floor() as usize).min(grid - 1), (gy.floor() as usize).min(grid - 1));
                let mut cells = vec![[ix, iy]];
                let (fx, fy) = (gx - ix as f64, gy - iy as f64);
                if fx < 0.5 && ix > 0 {
                    cells.push([ix - 1, iy]);
                } else if fx > 0.5 && ix + 1 < grid {
                    cells.push([ix + 1, iy]);
                }
                if fy < 0.5 && iy > 0 {
                    cells.push([ix, iy - 1]);
                } else if fy > 0.5 && iy + 1 < grid {
                    cells.push([ix, iy + 1]);
                }
                for (a, anchor) in config.anchors[scale].iter().enumerate() {
                    let ratio = (t.w / anchor[0]).max(anchor[0] / t.w).max(t.h / anchor[1]).max(anchor[1] / t.h);
                    if ratio >= config.anchor_ratio_limit {
                        continue;
                    }
                    for &cell in &cells {
                        out.push(Assignment { batch: b, scale, anchor: a, cell, target: t, class_id: lb.class_id });
                    }
                }
            }
        }
    }
    out
}

fn check_heads<E: Element>(config: &DetNetConfig, raw: &[&Tensor<E>; 3]) -> Result<usize> {
    let batch = raw[0].shape().first().copied().unwrap_or(0);
    for (t, g) in raw.iter().zip(config.grid_sizes()) {
        if t.shape() != [batch, config.head_channels(), 1, g, g] {
            return Err(Error::ShapeMismatch(format!(
                "head output {:?} does not match [{batch}, {}, 1, {g}, {g}]",
                t.shape(),
                config.head_channels()
            )));
        }
    }
    Ok(batch)
}

/// Flat index of `field` for anchor `a` at `cell` in a head tensor.
fn flat_index(config: &DetNetConfig, grid: usize, batch: usize, a: usize, field: usize, cell: [usize; 2]) -> usize {
    let ch = a * config.outputs_per_anchor() + field;
    ((batch * config.head_channels() + ch) * grid + cell[1]) * grid + cell[0]
}

/// Score-filtered detections per batch element, normalised to the input
/// and clamped to the unit square. Scores are `sigmoid(obj) * sigmoid(cls)`
/// for the best class.
pub fn decode_predictions<E: Element>(raw: &[&Tensor<E>; 3], config: &DetNetConfig, slice: usize) -> Result<Vec<Vec<Detection2D>>> {
    let batch = check_heads(config, raw)?;
    let size = config.input_size as f64;
    let mut out = vec![Vec::new(); batch];
    for (scale, t) in raw.iter().enumerate() {
        let stride = STRIDES[scale];
        let grid = config.input_size / stride;
        let d = t.data();
        for (b, dets) in out.iter_mut().enumerate() {
            for a in 0..ANCHORS_PER_SCALE {
                for y in 0..grid {
                    for x in 0..grid {
                        let at = |f: usize| d[flat_index(config, grid, b, a, f, [x, y])].to_f64().unwrap_or(f64::NAN);
                        let obj = sigmoid(at(4));
                        if obj < config.conf_threshold {
                            continue;
                        }
                        let (class_id, cls) = (0..config.class_count)
                            .map(|c| (c, sigmoid(at(5 + c))))
                            .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
                        let score = obj * cls;
                        if !(score >= config.conf_threshold) {
                            continue;
                        }
                        let px = decode_box([at(0), at(1), at(2), at(3)], [x, y], config.anchors[scale][a], stride);
                        let bbox = px.scaled(1.0 / size, 1.0 / size).clamped(1.0, 1.0);
                        dets.push(Detection2D { bbox, class_id, score, slice });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Loss terms of one batch (already weighted into `total`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

/// Builds the detection loss on the graph and returns the scalar total.
///
/// * box: mean `1 - GIoU` over all assignments;
/// * obj: per scale, mean BCE over every anchor slot (target 1 where
///   assigned), weighted by the scale's balance factor, then summed;
/// * cls: BCE over the class logits of assigned slots, one-hot targets.
///
/// Without assignments only the objectness term remains.
pub fn detection_loss<E: Element>(g: &mut Graph<'_, E>, raw: &[Var; 3], assignments: &[Assignment], config: &DetNetConfig) -> (Var, LossBreakdown) {
    let batch = g.shape(raw[0])[0];
    let nc = config.class_count;
    let m = assignments.len();
    let mut obj_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut box_parts = Vec::new();
    let mut box_target = Vec::with_capacity(4 * m);
    for (scale, &head) in raw.iter().enumerate() {
        let stride = STRIDES[scale];
        let grid = config.input_size / stride;
        let shape = g.shape(head).to_vec();
        let mut obj_t = Tensor::<E>::zeros(&shape);
        let mut obj_w = Tensor::<E>::zeros(&shape);
        for b in 0..batch {
            for a in 0..ANCHORS_PER_SCALE {
                for y in 0..grid {
                    for x in 0..grid {
                        obj_w.data_mut()[flat_index(config, grid, b, a, 4, [x, y])] = E::one();
                    }
                }
            }
        }
        let mine: Vec<&Assignment> = assignments.iter().filter(|s| s.scale == scale).collect();
        let mut cls_t = Tensor::<E>::zeros(&shape);
        let mut cls_w = Tensor::<E>::zeros(&shape);
        let mut gather = Vec::with_capacity(4 * mine.len());
        let (mut quad, mut lin, mut off) = (Vec::new(), Vec::new(), Vec::new());
        for s in &mine {
            obj_t.data_mut()[flat_index(config, grid, s.batch, s.anchor, 4, s.cell)] = E::one();
            for c in 0..nc {
                let i = flat_index(config, grid, s.batch, s.anchor, 5 + c, s.cell);
                cls_w.data_mut()[i] += E::one();
                if c == s.class_id {
                    cls_t.data_mut()[i] = E::one();
                }
            }
            for f in 0..4 {
                gather.push(flat_index(config, grid, s.batch, s.anchor, f, s.cell));
            }
            let st = stride as f64;
            let anchor = config.anchors[scale][s.anchor];
            // value = quad * sig^2 + lin * sig + off, see the module docs
            quad.extend([0.0, 0.0, 4.0 * anchor[0], 4.0 * anchor[1]]);
            lin.extend([2.0 * st, 2.0 * st, 0.0, 0.0]);
            off.extend([(s.cell[0] as f64 - 0.5) * st, (s.cell[1] as f64 - 0.5) * st, 0.0, 0.0]);
            box_target.extend([s.target.cx, s.target.cy, s.target.w, s.target.h].map(E::of));
        }
        let cells = (batch * ANCHORS_PER_SCALE * grid * grid) as f64;
        let obj = g.bce_with_logits(head, &obj_t, &obj_w, cells);
        obj_terms.push((obj, config.objectness_balance[scale]));
        if mine.is_empty() {
            continue;
        }
        cls_terms.push(g.bce_with_logits(head, &cls_t, &cls_w, (m * nc) as f64));
        let n = gather.len();
        let picked = g.gather(head, &gather);
        let sig = g.sigmoid(picked);
        let sq = g.mul(sig, sig);
        let to_tensor = |v: Vec<f64>| Tensor::from_vec(&[n], v.into_iter().map(E::of).collect());
        let q = g.constant(to_tensor(quad));
        let l = g.constant(to_tensor(lin));
        let o = g.constant(to_tensor(off));
        let a = g.mul(sq, q);
        let b = g.mul(sig, l);
        let ab = g.add(a, b);
        box_parts.push(g.add(ab, o));
    }
    let obj = g.weighted_sum(&obj_terms);
    let mut terms = vec![(obj, config.loss_weights.obj)];
    let mut parts = LossBreakdown { obj_loss: g.value(obj).item().to_f64().unwrap_or(f64::NAN), ..Default::default() };
    if m > 0 {
        let flat = if box_parts.len() == 1 { box_parts[0] } else { g.concat(&box_parts, 0) };
        let boxes = g.reshape(flat, &[m, 4]);
        let bl = g.giou_loss(boxes, &Tensor::from_vec(&[m, 4], box_target));
        let cls_pairs: Vec<(Var, f64)> = cls_terms.iter().map(|&v| (v, 1.0)).collect();
        let cl = g.weighted_sum(&cls_pairs);
        parts.box_loss = g.value(bl).item().to_f64().unwrap_or(f64::NAN);
        parts.cls_loss = g.value(cl).item().to_f64().unwrap_or(f64::NAN);
        terms.push((bl, config.loss_weights.box_));
        terms.push((cl, config.loss_weights.cls));
    }
    let total = g.weighted_sum(&terms);
    parts.total = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    (total, parts)
}
