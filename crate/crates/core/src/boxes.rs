//! Axis-aligned 2-D boxes shared by the detector, metrics and reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box given by centre and size, `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { cx: 0.5 * (x1 + x2), cy: 0.5 * (y1 + y2), w: x2 - x1, h: y2 - y1 }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { cx: self.cx * sx, cy: self.cy * sy, w: self.w * sx, h: self.h * sy }
    }

    /// Intersect with `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, x2) = (x1.clamp(0.0, width), x2.clamp(0.0, width));
        let (y1, y2) = (y1.clamp(0.0, height), y2.clamp(0.0, height));
        Self::from_corners([x1, y1, x2, y2])
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(ca, cb);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two corner boxes `(x1, y1, x2, y2)`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > bx[0] && bx[3] > bx[1]) {
            return Err(Error::InvalidArgument(format!("degenerate box {bx:?}")));
        }
    }
    let inter = intersection(a, b);
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let union = area(a) + area(b) - inter;
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    let c = area(hull);
    Ok(inter / union - (c - union) / c)
}

/// A scored detection on one axial slice. Coordinates are normalised to the
/// slice so that the image spans `[0, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub slice: usize,
}

/// A ground-truth box with its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}
