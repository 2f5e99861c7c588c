use std::cmp::Ordering;

use crate::boxes::{iou, Detection2D};

/// Greedy non-maximum suppression, class-agnostic. Candidates are visited
/// by descending score, ties broken by smaller `cx` then smaller `cy`; a
/// candidate is dropped when its IoU with any kept box exceeds
/// `iou_threshold`.
pub fn nms(detections: &[Detection2D], iou_threshold: f64) -> Vec<Detection2D> {
    let mut order: Vec<&Detection2D> = detections.iter().collect();
    order.sort_by(|a, b| by_rank(a, b));
    let mut kept: Vec<Detection2D> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Orders detections the way [`nms`] visits them.
pub(crate) fn by_rank(a: &Detection2D, b: &Detection2D) -> Ordering {
    b.score.total_cmp(&a.score).then(a.bbox.cx.total_cmp(&b.bbox.cx)).then(a.bbox.cy.total_cmp(&b.bbox.cy))
}
