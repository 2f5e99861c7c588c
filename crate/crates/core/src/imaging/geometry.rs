use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use super::{AxialSlice, CtVolume, Geometry, LungMask, HU_WINDOW_MIN};
use crate::error::{Error, Result};

impl Geometry {
    /// Continuous voxel index of a world point, checked against a grid of
    /// `shape` whose voxel `i` covers `[i - 0.5, i + 0.5]`.
    pub fn world_to_voxel(&self, world: [f64; 3], shape: [usize; 3]) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let idx = (world[a] - self.origin[a]) / self.spacing[a];
            if !(idx >= -0.5 && idx <= shape[a] as f64 - 0.5) {
                return Err(Error::OutOfBounds { axis: a, index: idx, size: shape[a] });
            }
            out[a] = idx;
        }
        Ok(out)
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + index[a] * self.spacing[a])
    }
}

/// `(world - origin) / spacing` per axis, `(z, y, x)`.
pub fn world_to_voxel(world: [f64; 3], volume: &CtVolume) -> Result<[f64; 3]> {
    volume.geometry().world_to_voxel(world, volume.shape())
}

pub fn voxel_to_world(index: [f64; 3], volume: &CtVolume) -> [f64; 3] {
    volume.geometry().voxel_to_world(index)
}

/// Half-open voxel box `[start, end)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl CropBox {
    pub fn shape(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.end[a] - self.start[a])
    }

    pub fn contains(&self, index: [usize; 3]) -> bool {
        (0..3).all(|a| index[a] >= self.start[a] && index[a] < self.end[a])
    }

    /// Map an index inside the crop back to the uncropped grid.
    pub fn to_parent(&self, index: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| index[a] + self.start[a] as f64)
    }
}

/// Tight box around the mask foreground grown by `margin` voxels and
/// clamped to the grid; both grids are cropped to it.
pub fn crop_foreground(volume: &CtVolume, mask: &LungMask, margin: usize) -> Result<(CtVolume, LungMask, CropBox)> {
    mask.check_aligned(volume)?;
    let shape = mask.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in mask.voxels().indexed_iter() {
        if v == 1 {
            any = true;
            for (a, i) in [z, y, x].into_iter().enumerate() {
                lo[a] = lo[a].min(i);
                hi[a] = hi[a].max(i);
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    let start = [0, 1, 2].map(|a| lo[a].saturating_sub(margin));
    let end = [0, 1, 2].map(|a| (hi[a] + margin + 1).min(shape[a]));
    let bx = CropBox { start, end };
    let sl = s![start[0]..end[0], start[1]..end[1], start[2]..end[2]];
    let g = volume.geometry();
    let geometry = Geometry { spacing: g.spacing, origin: g.voxel_to_world(start.map(|v| v as f64)) };
    let vol = CtVolume { voxels: volume.voxels().slice(sl).to_owned(), geometry, normalized: volume.is_normalized() };
    let m = LungMask { voxels: mask.voxels().slice(sl).to_owned(), geometry };
    Ok((vol, m, bx))
}

/// Per-axis maximum of a set of crop shapes.
pub fn common_crop_shape(boxes: &[CropBox]) -> [usize; 3] {
    boxes.iter().fold([0; 3], |acc, b| {
        let s = b.shape();
        [0, 1, 2].map(|a| acc[a].max(s[a]))
    })
}

/// Pad a cropped pair at the high end of each axis up to `shape`. Padding is
/// air: 0 for normalized volumes, the window floor otherwise; mask padding is
/// background.
pub fn pad_to_shape(volume: &CtVolume, mask: &LungMask, shape: [usize; 3]) -> Result<(CtVolume, LungMask)> {
    mask.check_aligned(volume)?;
    let cur = volume.shape();
    if (0..3).any(|a| shape[a] < cur[a]) {
        return Err(Error::ShapeMismatch(format!("cannot pad {cur:?} down to {shape:?}")));
    }
    let fill = if volume.is_normalized() { 0.0 } else { HU_WINDOW_MIN };
    let mut v = Array3::from_elem(shape, fill);
    v.slice_mut(s![..cur[0], ..cur[1], ..cur[2]]).assign(volume.voxels());
    let mut m = Array3::zeros(shape);
    m.slice_mut(s![..cur[0], ..cur[1], ..cur[2]]).assign(mask.voxels());
    Ok((
        CtVolume { voxels: v, geometry: volume.geometry(), normalized: volume.is_normalized() },
        LungMask { voxels: m, geometry: mask.geometry() },
    ))
}

pub fn extract_axial_slice(volume: &CtVolume, z: usize) -> Result<AxialSlice> {
    let depth = volume.shape()[0];
    if z >= depth {
        return Err(Error::OutOfBounds { axis: 0, index: z as f64, size: depth });
    }
    let sp = volume.spacing();
    Ok(AxialSlice { pixels: volume.voxels().index_axis(ndarray::Axis(0), z).to_owned(), spacing: [sp[1], sp[2]] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volume(shape: [usize; 3], g: Geometry) -> CtVolume {
        CtVolume::new(Array3::from_shape_fn(shape, |(z, y, x)| (z * 100 + y * 10 + x) as f32), g).unwrap()
    }

    #[test]
    fn world_origin_is_voxel_zero() {
        let g = Geometry::new([2.5, 0.7, 0.7], [-50.0, -100.0, -100.0]).unwrap();
        assert_eq!(g.world_to_voxel(g.origin, [4, 4, 4]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn world_to_voxel_divides_by_spacing() {
        let g = Geometry::new([0.7; 3], [-100.0; 3]).unwrap();
        let idx = g.world_to_voxel([40.0; 3], [512; 3]).unwrap();
        for v in idx {
            assert!((v - 200.0).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_grid_reports_axis() {
        let g = Geometry::unit();
        match g.world_to_voxel([0.0, 0.0, 9.0], [4, 4, 4]) {
            Err(Error::OutOfBounds { axis, .. }) => assert_eq!(axis, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.world_to_voxel([-0.5, 3.5, 0.0], [4, 4, 4]).is_ok());
    }

    #[test]
    fn single_voxel_crop() {
        let v = volume([16, 24, 40], Geometry::new([1.0, 2.0, 3.0], [5.0, 6.0, 7.0]).unwrap());
        let mut m = Array3::zeros((16, 24, 40));
        m[[10, 20, 30]] = 1;
        let m = LungMask::new(m, v.geometry()).unwrap();
        let (cv, cm, bx) = crop_foreground(&v, &m, 0).unwrap();
        assert_eq!(bx, CropBox { start: [10, 20, 30], end: [11, 21, 31] });
        assert_eq!(cv.shape(), [1, 1, 1]);
        assert_eq!(cv.voxels()[[0, 0, 0]], v.voxels()[[10, 20, 30]]);
        assert_eq!(cm.foreground_count(), 1);
        assert_eq!(cv.origin(), [15.0, 46.0, 97.0]);
    }

    #[test]
    fn full_foreground_keeps_extent() {
        let v = volume([3, 4, 5], Geometry::unit());
        let m = LungMask::new(Array3::ones((3, 4, 5)), v.geometry()).unwrap();
        let (cv, _, bx) = crop_foreground(&v, &m, 3).unwrap();
        assert_eq!(bx.shape(), [3, 4, 5]);
        assert_eq!(cv.voxels(), v.voxels());
    }

    #[test]
    fn margin_dilates_and_clamps() {
        let v = volume([12, 12, 12], Geometry::unit());
        let mut m = Array3::zeros((12, 12, 12));
        for i in 5..=9 {
            m[[i, 6, 1]] = 1;
        }
        let m = LungMask::new(m, v.geometry()).unwrap();
        let (_, _, bx) = crop_foreground(&v, &m, 2).unwrap();
        // inclusive 3..11 on the z axis; x clamps at 0
        assert_eq!(bx.start, [3, 4, 0]);
        assert_eq!(bx.end, [12, 9, 4]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let v = volume([2, 2, 2], Geometry::unit());
        let m = LungMask::empty_like(&v);
        assert!(matches!(crop_foreground(&v, &m, 0), Err(Error::EmptyForeground)));
    }

    #[test]
    fn padding_grows_to_common_shape() {
        let v = volume([2, 3, 4], Geometry::unit());
        let m = LungMask::new(Array3::ones((2, 3, 4)), v.geometry()).unwrap();
        let target = common_crop_shape(&[CropBox { start: [0; 3], end: [2, 3, 4] }, CropBox { start: [1; 3], end: [4, 3, 3] }]);
        assert_eq!(target, [3, 3, 4]);
        let (pv, pm) = pad_to_shape(&v, &m, target).unwrap();
        assert_eq!(pv.voxels()[[2, 0, 0]], HU_WINDOW_MIN);
        assert_eq!(pv.voxels()[[1, 2, 3]], v.voxels()[[1, 2, 3]]);
        assert_eq!(pm.foreground_count(), 24);
        assert!(pad_to_shape(&v, &m, [1, 3, 4]).is_err());
    }

    #[test]
    fn axial_slices_index_the_grid() {
        let v = volume([3, 4, 5], Geometry::new([2.0, 0.5, 0.25], [0.0; 3]).unwrap());
        let s0 = extract_axial_slice(&v, 0).unwrap();
        assert_eq!(s0.spacing, [0.5, 0.25]);
        for z in 0..3 {
            let sl = extract_axial_slice(&v, z).unwrap();
            for ((y, x), &p) in sl.pixels.indexed_iter() {
                assert_eq!(p, v.voxels()[[z, y, x]]);
            }
        }
        assert!(extract_axial_slice(&v, 3).is_err());
        let c = CtVolume::new(Array3::from_elem((2, 2, 2), 7.0), Geometry::unit()).unwrap();
        assert!(extract_axial_slice(&c, 1).unwrap().pixels.iter().all(|&p| p == 7.0));
    }

    proptest! {
        #[test]
        fn world_voxel_round_trip(idx in proptest::array::uniform3(0.0f64..63.0), sp in proptest::array::uniform3(0.2f64..5.0), org in proptest::array::uniform3(-500.0f64..500.0)) {
            let g = Geometry::new(sp, org).unwrap();
            let back = g.world_to_voxel(g.voxel_to_world(idx), [64; 3]).unwrap();
            for a in 0..3 {
                prop_assert!((back[a] - idx[a]).abs() <= 1e-9);
            }
        }

        #[test]
        fn crop_box_contains_all_foreground(bits in proptest::collection::vec(0u8..2, 4 * 5 * 3), margin in 0usize..3) {
            prop_assume!(bits.contains(&1));
            let v = volume([4, 5, 3], Geometry::unit());
            let m = LungMask::new(Array3::from_shape_vec((4, 5, 3), bits).unwrap(), v.geometry()).unwrap();
            let (_, cm, bx) = crop_foreground(&v, &m, margin).unwrap();
            for ((z, y, x), &b) in m.voxels().indexed_iter() {
                if b == 1 {
                    prop_assert!(bx.contains([z, y, x]));
                }
            }
            prop_assert_eq!(cm.foreground_count(), m.foreground_count());
        }
    }
}
