use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnchorSet, ANCHORS_PER_SCALE};
use crate::error::{Error, Result};

/// IoU of two boxes sharing a centre.
fn centred_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// k-means over box sizes with `1 - IoU` as the distance, seeded with
/// k-means++. Result is sorted by area, smallest first.
pub fn kmeans_anchors(sizes: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if sizes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || sizes.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("k must be positive and sizes strictly positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![sizes[rng.random_range(0..sizes.len())]];
    while centres.len() < k {
        let d: Vec<f64> = sizes
            .iter()
            .map(|&s| centres.iter().map(|&c| 1.0 - centred_iou(s, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            sizes[rng.random_range(0..sizes.len())]
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = sizes.len() - 1;
            for (i, &v) in d.iter().enumerate() {
                if r < v {
                    pick = i;
                    break;
                }
                r -= v;
            }
            sizes[pick]
        };
        centres.push(next);
    }
    for _ in 0..100 {
        let mut sum = vec![[0.0; 2]; k];
        let mut count = vec![0usize; k];
        for &s in sizes {
            let best = (0..k).max_by(|&a, &b| centred_iou(s, centres[a]).total_cmp(&centred_iou(s, centres[b])).then(b.cmp(&a))).unwrap_or(0);
            sum[best][0] += s[0];
            sum[best][1] += s[1];
            count[best] += 1;
        }
        let mut moved = false;
        for i in 0..k {
            if count[i] > 0 {
                let c = [sum[i][0] / count[i] as f64, sum[i][1] / count[i] as f64];
                moved |= c != centres[i];
                centres[i] = c;
            }
        }
        if !moved {
            break;
        }
    }
    centres.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    Ok(centres)
}

/// Nine anchors split three per scale, smallest to the finest scale.
pub fn anchors_from_sizes(sizes: &[[f64; 2]], seed: u64) -> Result<AnchorSet> {
    let c = kmeans_anchors(sizes, 3 * ANCHORS_PER_SCALE, seed)?;
    Ok(std::array::from_fn(|s| std::array::from_fn(|a| c[s * ANCHORS_PER_SCALE + a])))
}
