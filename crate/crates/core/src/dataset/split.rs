use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Integer partition sizes proportional to `fractions`, by largest remainder
/// (earlier partitions win ties).
pub fn partition_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffle by `seed` and cut into train / validation / test.
pub fn split_dataset<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    if items.len() < needed {
        return Err(Error::TooFewItems { needed, got: items.len() });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = partition_sizes(items.len(), &fractions);
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    let (a, b) = (sizes[0], sizes[0] + sizes[1]);
    Ok((take(0..a), take(a..b), take(b..items.len())))
}

/// Indices for a training / validation holdout; at least one item stays in
/// training.
pub fn holdout_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((validation_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let val = order.split_off(n - n_val);
    (order, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_items_split_eight_one_one() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b, c) = split_dataset(&items, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_dataset(&items, [0.8, 0.1, 0.1], 3).unwrap(), (a, b, c));
    }

    #[test]
    fn table_counts_scale_proportionally() {
        assert_eq!(partition_sizes(888, &[800.0 / 888.0, 88.0 / 888.0, 0.0]), vec![800, 88, 0]);
    }

    #[test]
    fn too_few_items() {
        assert!(matches!(split_dataset(&[1, 2], [0.5, 0.25, 0.25], 0), Err(Error::TooFewItems { needed: 3, got: 2 })));
        assert!(split_dataset(&[1, 2], [0.5, 0.25, 0.2], 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_an_exhaustive_partition(n in 3usize..60, seed in any::<u64>(), f0 in 0.1f64..0.8) {
            let items: Vec<usize> = (0..n).collect();
            let f1 = (1.0 - f0) / 2.0;
            let (a, b, c) = split_dataset(&items, [f0, f1, 1.0 - f0 - f1], seed).unwrap();
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }

        #[test]
        fn holdout_is_disjoint(n in 1usize..50, f in 0.0f64..0.5, seed in any::<u64>()) {
            let (t, v) = holdout_indices(n, f, seed);
            prop_assert!(!t.is_empty());
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
