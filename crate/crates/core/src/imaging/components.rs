use ndarray::Array3;

use super::LungMask;

/// Label 6-connected foreground components in raster order; returns the
/// label grid (0 = background) and the voxel count per label (index 0 unused).
fn label_components(mask: &Array3<u8>) -> (Array3<u32>, Vec<usize>) {
    let dims = mask.dim();
    let mut labels = Array3::<u32>::zeros(dims);
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for (start, &v) in mask.indexed_iter() {
        if v == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut count = 0;
        labels[start] = id;
        stack.push(start);
        while let Some((z, y, x)) = stack.pop() {
            count += 1;
            let neighbours = [
                (z.wrapping_sub(1), y, x),
                (z + 1, y, x),
                (z, y.wrapping_sub(1), x),
                (z, y + 1, x),
                (z, y, x.wrapping_sub(1)),
                (z, y, x + 1),
            ];
            for n in neighbours {
                if n.0 < dims.0 && n.1 < dims.1 && n.2 < dims.2 && mask[n] == 1 && labels[n] == 0 {
                    labels[n] = id;
                    stack.push(n);
                }
            }
        }
        sizes.push(count);
    }
    (labels, sizes)
}

/// Keep the `keep` largest 6-connected components. Equal sizes are ranked by
/// raster order of their first voxel.
pub fn keep_largest_components(mask: &LungMask, keep: usize) -> LungMask {
    let (labels, sizes) = label_components(mask.voxels());
    let mut order: Vec<usize> = (1..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut kept = vec![false; sizes.len()];
    for &l in order.iter().take(keep) {
        kept[l] = true;
    }
    let voxels = labels.mapv(|l| u8::from(l != 0 && kept[l as usize]));
    LungMask { voxels, geometry: mask.geometry() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Geometry;

    #[test]
    fn keeps_two_largest_blobs() {
        let mut m = Array3::zeros((5, 5, 9));
        // blob A: 3 voxels, blob B: 4 voxels, blob C: 1 voxel, D: diagonal neighbour of C
        for x in 0..3 {
            m[[0, 0, x]] = 1;
        }
        for z in 1..5 {
            m[[z, 4, 8]] = 1;
        }
        m[[2, 2, 4]] = 1;
        m[[3, 3, 5]] = 1;
        let mask = LungMask::new(m, Geometry::unit()).unwrap();
        let (_, sizes) = label_components(mask.voxels());
        assert_eq!(sizes.len() - 1, 4);
        let kept = keep_largest_components(&mask, 2);
        assert_eq!(kept.foreground_count(), 7);
        assert!(kept.contains([0, 0, 1]) && kept.contains([4, 4, 8]));
        assert!(!kept.contains([2, 2, 4]));
    }

    #[test]
    fn empty_mask_stays_empty() {
        let mask = LungMask::new(Array3::zeros((3, 3, 3)), Geometry::unit()).unwrap();
        assert!(keep_largest_components(&mask, 2).is_empty());
    }
}
