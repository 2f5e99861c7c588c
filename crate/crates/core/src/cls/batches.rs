use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One epoch of class-balanced batches of sample indices.
#[derive(Clone, Debug)]
pub struct BalancedBatches {
    batches: std::vec::IntoIter<Vec<usize>>,
    len: usize,
}

impl BalancedBatches {
    pub fn batches_per_epoch(&self) -> usize {
        self.len
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        self.batches.next()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl ExactSizeIterator for BalancedBatches {}

/// Batches holding `batch_size / class_count` samples of every class.
///
/// The epoch is long enough to visit the largest class once; smaller classes
/// are drawn from successive shuffles of their members, so they repeat only
/// after every member has been used.
pub fn balanced_batches(labels: &[usize], class_count: usize, batch_size: usize, seed: u64) -> Result<BalancedBatches> {
    if class_count == 0 || batch_size == 0 || batch_size % class_count != 0 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} does not split evenly over {class_count} classes")));
    }
    let mut members = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        let slot = members.get_mut(l).ok_or_else(|| Error::InvalidArgument(format!("label {l} out of range for {class_count} classes")))?;
        slot.push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass(format!("class {c}")));
    }
    let quota = batch_size / class_count;
    let n_batches = members.iter().map(Vec::len).max().unwrap_or(0).div_ceil(quota);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams: Vec<Vec<usize>> = members
        .iter()
        .map(|m| {
            let mut s = Vec::with_capacity(n_batches * quota + m.len());
            while s.len() < n_batches * quota {
                let mut round = m.clone();
                round.shuffle(&mut rng);
                s.extend(round);
            }
            s
        })
        .collect();
    let batches: Vec<Vec<usize>> = (0..n_batches).map(|b| streams.iter().flat_map(|s| s[b * quota..(b + 1) * quota].iter().copied()).collect()).collect();
    Ok(BalancedBatches { len: batches.len(), batches: batches.into_iter() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn labels(benign: usize, malignant: usize) -> Vec<usize> {
        let mut v = vec![0; benign];
        v.extend(vec![1; malignant]);
        v
    }

    #[test]
    fn minority_is_oversampled_to_equal_halves() {
        let l = labels(100, 20);
        let it = balanced_batches(&l, 2, 20, 1).unwrap();
        assert_eq!(it.batches_per_epoch(), 10);
        let mut seen_benign = HashSet::new();
        for b in it {
            assert_eq!(b.len(), 20);
            assert_eq!(b.iter().filter(|&&i| l[i] == 0).count(), 10);
            seen_benign.extend(b.iter().copied().filter(|&i| l[i] == 0));
        }
        assert_eq!(seen_benign.len(), 100);
    }

    #[test]
    fn equal_classes_draw_without_replacement() {
        let l = labels(40, 40);
        let all: Vec<usize> = balanced_batches(&l, 2, 16, 9).unwrap().flatten().collect();
        assert_eq!(all.len(), 80);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 80);
    }

    #[test]
    fn seed_determines_the_sequence() {
        let l = labels(30, 7);
        let a: Vec<_> = balanced_batches(&l, 2, 8, 4).unwrap().collect();
        let b: Vec<_> = balanced_batches(&l, 2, 8, 4).unwrap().collect();
        let c: Vec<_> = balanced_batches(&l, 2, 8, 5).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_class_and_odd_batch_are_errors() {
        assert!(matches!(balanced_batches(&labels(5, 0), 2, 4, 0), Err(Error::MissingClass(_))));
        assert!(matches!(balanced_batches(&labels(5, 5), 2, 5, 0), Err(Error::InvalidArgument(_))));
        assert!(balanced_batches(&[0, 2], 2, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn every_batch_has_equal_class_counts(benign in 1usize..60, malignant in 1usize..60, half in 1usize..12, seed in any::<u64>()) {
            let l = labels(benign, malignant);
            for b in balanced_batches(&l, 2, 2 * half, seed).unwrap() {
                prop_assert_eq!(b.iter().filter(|&&i| l[i] == 1).count(), half);
                prop_assert_eq!(b.len(), 2 * half);
            }
        }
    }
}
