//! Segmentation, detection and classification metrics.

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, Detection2D, LabeledBox};
use crate::error::{Error, Result};

/// `2|X ∩ Y| / (|X| + |Y|)` over nonzero voxels; two empty masks score 1.
pub fn dice_score(x: ArrayView3<u8>, y: ArrayView3<u8>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("dice operands {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (mut inter, mut sx, mut sy) = (0u64, 0u64, 0u64);
    for (&a, &b) in x.iter().zip(y.iter()) {
        let (a, b) = (a != 0, b != 0);
        sx += u64::from(a);
        sy += u64::from(b);
        inter += u64::from(a && b);
    }
    if sx + sy == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sx + sy) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Classification scores; ratios with a zero denominator are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl BinaryScores {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        Self {
            counts: c,
            accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        }
    }
}

/// Counts and scores for binary labels where `true` is the positive class.
pub fn confusion_and_scores(predictions: &[bool], truth: &[bool]) -> Result<BinaryScores> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} labels", predictions.len(), truth.len())));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(BinaryScores::from_counts(c))
}

/// Operating points `(recall, precision)` in order of decreasing score
/// threshold; recall is non-decreasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    /// All-point interpolated area: recall steps weighted by the best
    /// precision reached at that recall or beyond.
    pub fn area(&self) -> f64 {
        let mut envelope = 0.0f64;
        let mut interp = vec![0.0; self.points.len()];
        for (i, &(_, p)) in self.points.iter().enumerate().rev() {
            envelope = envelope.max(p);
            interp[i] = envelope;
        }
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for (&(r, _), &p) in self.points.iter().zip(&interp) {
            area += (r - prev_recall) * p;
            prev_recall = r;
        }
        area
    }
}

/// Precision/recall curve for one class at one IoU threshold. Detections are
/// matched greedily in descending score order to the unmatched ground truth
/// box of the same image with the highest IoU. Points are emitted only
/// between distinct scores, so tied detections enter together. `None` when
/// there is no ground truth of that class.
pub fn pr_curve(detections: &[Vec<Detection2D>], ground_truth: &[Vec<LabeledBox>], class_id: usize, iou_threshold: f64) -> Result<Option<PrCurve>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!("{} detection images vs {} ground-truth images", detections.len(), ground_truth.len())));
    }
    let gt: Vec<Vec<&LabeledBox>> = ground_truth.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).collect()).collect();
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut order: Vec<(usize, &Detection2D)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::new();
    for (k, &(img, det)) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt[img].iter().enumerate() {
            if matched[img][j] {
                continue;
            }
            let v = iou(&det.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[img][j] = true;
            tp += 1;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|next| next.1.score != det.score);
        if last_of_tie {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
    }
    Ok(Some(PrCurve { points }))
}

/// All-point interpolated average precision for one class.
pub fn average_precision_for_class(detections: &[Vec<Detection2D>], ground_truth: &[Vec<LabeledBox>], class_id: usize, iou_threshold: f64) -> Result<Option<f64>> {
    Ok(pr_curve(detections, ground_truth, class_id, iou_threshold)?.map(|c| c.area()))
}

/// Average precision over all classes pooled as one; `None` without ground truth.
pub fn average_precision(detections: &[Vec<Detection2D>], ground_truth: &[Vec<LabeledBox>], iou_threshold: f64) -> Result<Option<f64>> {
    let strip = |d: &Detection2D| Detection2D { class_id: 0, ..*d };
    let dets: Vec<Vec<Detection2D>> = detections.iter().map(|v| v.iter().map(strip).collect()).collect();
    let gts: Vec<Vec<LabeledBox>> = ground_truth.iter().map(|v| v.iter().map(|g| LabeledBox { class_id: 0, ..*g }).collect()).collect();
    average_precision_for_class(&dets, &gts, 0, iou_threshold)
}

/// Mean of per-class AP over the classes present in the ground truth.
pub fn mean_average_precision(detections: &[Vec<Detection2D>], ground_truth: &[Vec<LabeledBox>], iou_threshold: f64) -> Result<Option<f64>> {
    let mut classes: Vec<usize> = ground_truth.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        if detections.len() != ground_truth.len() {
            return Err(Error::ShapeMismatch("image counts differ".into()));
        }
        return Ok(None);
    }
    let mut sum = 0.0;
    for &c in &classes {
        sum += average_precision_for_class(detections, ground_truth, c, iou_threshold)?.unwrap_or(0.0);
    }
    Ok(Some(sum / classes.len() as f64))
}

pub fn map_at_50(detections: &[Vec<Detection2D>], ground_truth: &[Vec<LabeledBox>]) -> Result<Option<f64>> {
    mean_average_precision(detections, ground_truth, 0.5)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Mean of mAP over the ten IoU thresholds 0.50:0.05:0.95.
pub fn map_at_50_95(detections: &[Vec<Detection2D>], ground_truth: &[Vec<LabeledBox>]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    for t in coco_iou_thresholds() {
        match mean_average_precision(detections, ground_truth, t)? {
            Some(v) => sum += v,
            None => return Ok(None),
        }
    }
    Ok(Some(sum / 10.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use ndarray::Array3;

    fn det(cx: f64, score: f64) -> Detection2D {
        Detection2D { bbox: BBox::new(cx, 0.5, 0.1, 0.1), class_id: 0, score, slice: 0 }
    }

    fn gt(cx: f64) -> LabeledBox {
        LabeledBox { bbox: BBox::new(cx, 0.5, 0.1, 0.1), class_id: 0 }
    }

    #[test]
    fn dice_examples() {
        let mut x = Array3::<u8>::zeros((1, 1, 8));
        let mut y = Array3::<u8>::zeros((1, 1, 8));
        for i in 0..4 {
            x[[0, 0, i]] = 1;
        }
        for i in 1..7 {
            y[[0, 0, i]] = 1;
        }
        assert!((dice_score(x.view(), y.view()).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice_score(x.view(), x.view()).unwrap(), 1.0);
        let z = Array3::<u8>::zeros((1, 1, 8));
        assert_eq!(dice_score(z.view(), z.view()).unwrap(), 1.0);
        let mut w = Array3::<u8>::zeros((1, 1, 8));
        w[[0, 0, 7]] = 1;
        assert_eq!(dice_score(x.view(), w.view()).unwrap(), 0.0);
        assert!(dice_score(x.view(), Array3::<u8>::zeros((1, 2, 4)).view()).is_err());
    }

    #[test]
    fn confusion_example_counts() {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for (n, pv, tv) in [(93, true, true), (7, false, true), (94, false, false), (6, true, false)] {
            p.extend(std::iter::repeat_n(pv, n));
            t.extend(std::iter::repeat_n(tv, n));
        }
        let s = confusion_and_scores(&p, &t).unwrap();
        assert_eq!(s.counts, ConfusionCounts { tp: 93, tn: 94, fp: 6, fn_: 7 });
        assert!((s.accuracy - 0.935).abs() < 1e-15);
        assert!((s.recall.unwrap() - 0.93).abs() < 1e-15);
        assert!((s.precision.unwrap() - 93.0 / 99.0).abs() < 1e-15);
        assert!((s.precision.unwrap() - 0.9394).abs() < 1e-4);
    }

    #[test]
    fn undefined_ratios_are_none() {
        let s = confusion_and_scores(&[false, false], &[true, false]).unwrap();
        assert_eq!(s.precision, None);
        assert_eq!(s.recall, Some(0.0));
        let all = confusion_and_scores(&[true, false], &[true, false]).unwrap();
        assert_eq!((all.accuracy, all.precision, all.recall, all.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        assert!(confusion_and_scores(&[], &[]).is_err());
        assert!(confusion_and_scores(&[true], &[]).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = vec![vec![gt(0.3)], vec![gt(0.6)]];
        let perfect = vec![vec![det(0.3, 0.9)], vec![det(0.6, 0.8)]];
        assert_eq!(average_precision(&perfect, &g, 0.5).unwrap(), Some(1.0));

        let one = vec![vec![gt(0.3)]];
        let extra = vec![vec![det(0.3, 0.9), det(0.8, 0.8)]];
        let c = pr_curve(&extra, &one, 0, 0.5).unwrap().unwrap();
        assert_eq!(c.points, vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(c.area(), 1.0);

        let wrong = vec![vec![det(0.8, 0.9)]];
        assert_eq!(average_precision(&wrong, &one, 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&wrong, &[vec![]], 0.5).unwrap(), None);
    }

    #[test]
    fn tied_scores_enter_together() {
        let one = vec![vec![gt(0.3)]];
        let tied = vec![vec![det(0.8, 0.5), det(0.3, 0.5)]];
        assert_eq!(average_precision(&tied, &one, 0.5).unwrap(), Some(0.5));
    }

    #[test]
    fn coco_average_sits_between_zero_and_map50() {
        let one = vec![vec![gt(0.5)]];
        // IoU of a box shifted by 0.02 with width 0.1: 0.08/0.12 = 2/3
        let shifted = vec![vec![det(0.52, 0.9)]];
        let m50 = map_at_50(&shifted, &one).unwrap().unwrap();
        let m5095 = map_at_50_95(&shifted, &one).unwrap().unwrap();
        assert_eq!(m50, 1.0);
        assert!(m5095 > 0.0 && m5095 < m50);
        // thresholds 0.50, 0.55, 0.60, 0.65 pass
        assert!((m5095 - 0.4).abs() < 1e-12);
        let exact = vec![vec![det(0.5, 0.9)]];
        assert_eq!(map_at_50_95(&exact, &one).unwrap(), Some(1.0));
    }
}
