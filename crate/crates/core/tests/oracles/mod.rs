//! Brute-force reference implementations used by the metric property tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ctsf_core::boxes::{BBox, Detection2D, LabeledBox};
use ctsf_core::dataset::{slice_bounding_boxes, NoduleAnnotation};
use ctsf_core::imaging::{CtVolume, Geometry};
use ndarray::Array3;
use rand::Rng;

/// Dice from explicit voxel index sets.
pub fn dice_by_sets(x: &[u8], y: &[u8]) -> f64 {
    let sx: BTreeSet<usize> = x.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect();
    let sy: BTreeSet<usize> = y.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect();
    if sx.is_empty() && sy.is_empty() {
        return 1.0;
    }
    2.0 * sx.intersection(&sy).count() as f64 / (sx.len() + sy.len()) as f64
}

/// `(tp, tn, fp, fn)` by filtering the pairs four separate times.
pub fn confusion_by_filtering(pred: &[bool], truth: &[bool]) -> (u64, u64, u64, u64) {
    let count = |p: bool, t: bool| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count() as u64;
    (count(true, true), count(false, false), count(true, false), count(false, true))
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// True positives among the detections scoring at least `threshold`,
/// matched from scratch.
fn true_positives_at(dets: &[Vec<Detection2D>], gts: &[Vec<LabeledBox>], threshold: f64, iou_threshold: f64) -> (usize, usize) {
    let mut kept: Vec<(usize, Detection2D)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for d in ds {
            if d.score >= threshold {
                kept.push((img, *d));
            }
        }
    }
    kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for (img, d) in &kept {
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, g) in gts[*img].iter().enumerate() {
            let v = overlap(&d.bbox, &g.bbox);
            if !used[*img][j] && v >= iou_threshold && v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[*img][j] = true;
            tp += 1;
        }
    }
    (tp, kept.len())
}

/// AP by enumerating every score threshold as an operating point and
/// integrating the upper precision envelope over recall.
pub fn ap_by_thresholds(dets: &[Vec<Detection2D>], gts: &[Vec<LabeledBox>], iou_threshold: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, n) = true_positives_at(dets, gts, t, iou_threshold);
            (tp as f64 / n_gt as f64, tp as f64 / n as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    Some(area)
}

/// A random detection problem over a few images with at most
/// `max_detections` detections in total.
pub fn random_detection_instance<R: Rng>(rng: &mut R, max_detections: usize) -> (Vec<Vec<Detection2D>>, Vec<Vec<LabeledBox>>) {
    let images = rng.random_range(1..=3);
    let mut gts = vec![Vec::new(); images];
    let mut dets = vec![Vec::new(); images];
    let rand_box = |rng: &mut R| BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    for g in gts.iter_mut() {
        for _ in 0..rng.random_range(0..=3) {
            g.push(LabeledBox { bbox: rand_box(rng), class_id: 0 });
        }
    }
    if gts.iter().all(Vec::is_empty) {
        gts[0].push(LabeledBox { bbox: rand_box(rng), class_id: 0 });
    }
    let n = rng.random_range(0..=max_detections);
    for _ in 0..n {
        let img = rng.random_range(0..images);
        let bbox = if !gts[img].is_empty() && rng.random_bool(0.6) {
            let g = gts[img][rng.random_range(0..gts[img].len())].bbox;
            BBox::new(g.cx + rng.random_range(-0.05..0.05), g.cy + rng.random_range(-0.05..0.05), g.w * rng.random_range(0.7..1.3), g.h * rng.random_range(0.7..1.3))
        } else {
            rand_box(rng)
        };
        dets[img].push(Detection2D { bbox, class_id: 0, score: rng.random_range(0.0..1.0), slice: img });
    }
    (dets, gts)
}

/// O(n²) greedy suppression: repeatedly take the best remaining box and
/// discard everything overlapping it by more than `threshold`.
pub fn nms_by_repeated_max(dets: &[Detection2D], threshold: f64) -> Vec<Detection2D> {
    let mut remaining: Vec<Detection2D> = dets.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (&remaining[i], &remaining[best]);
            let key = |d: &Detection2D| (d.score, -d.bbox.cx, -d.bbox.cy);
            if key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater) {
                best = i;
            }
        }
        let top = remaining.swap_remove(best);
        remaining.retain(|d| overlap(&d.bbox, &top.bbox) <= threshold);
        kept.push(top);
    }
    kept
}

/// Volume of a sphere of `radius` mm sampled at `spacing` mm: first from
/// the per-slice annotation disks, then by counting voxel centres inside.
pub fn sphere_slice_volumes(radius: f64, spacing: f64) -> (f64, f64) {
    let n = (2.0 * radius / spacing).ceil() as usize + 8;
    let vol = CtVolume::new(Array3::zeros((n, n, n)), Geometry::new([spacing; 3], [-3.0, 1.0, 2.0]).unwrap()).unwrap();
    let mid = -3.0 + 0.5 * n as f64 * spacing + 0.13;
    let centre = [mid, mid + 4.0, mid + 5.0];
    let ann = NoduleAnnotation { series_id: "s".into(), center: centre, diameter: 2.0 * radius, malignancy: None };
    let [_, sy, sx] = vol.spacing();
    let [_, h, w] = vol.shape();
    let integrated: f64 = slice_bounding_boxes(&ann, &vol)
        .unwrap()
        .iter()
        .map(|(_, r)| std::f64::consts::PI * (r.w * w as f64 * sx / 2.0) * (r.h * h as f64 * sy / 2.0) * spacing)
        .sum();
    // voxelisation: count 0.5 mm voxel centres inside the sphere
    let mut inside = 0usize;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = vol.geometry().voxel_to_world([z as f64, y as f64, x as f64]);
                let d2: f64 = (0..3).map(|a| (p[a] - centre[a]).powi(2)).sum();
                inside += usize::from(d2 <= radius * radius);
            }
        }
    }
    (integrated, inside as f64 * spacing.powi(3))
}
