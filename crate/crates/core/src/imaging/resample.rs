use ndarray::{Array3, Axis, Zip};

use super::{CtVolume, Geometry, LungMask};
use crate::error::{Error, Result};

/// Output of [`resample_to_canonical`].
#[derive(Clone, Debug)]
pub struct Resampled {
    pub volume: CtVolume,
    pub mask: Option<LungMask>,
    /// Non-fatal conditions such as upsampling a single-voxel axis.
    pub warnings: Vec<String>,
}

/// Continuous source index of output voxel `j` when a grid with spacing
/// `old` is resampled to spacing `new`, keeping the start of the extent fixed.
#[inline]
fn source_coord(j: usize, old: f64, new: f64, len: usize) -> f64 {
    ((j as f64 + 0.5) * new / old - 0.5).clamp(0.0, (len - 1) as f64)
}

fn linear_axis(data: &Array3<f32>, axis: usize, new_len: usize, old: f64, new: f64) -> Array3<f32> {
    let len = data.len_of(Axis(axis));
    if len == new_len && old == new {
        return data.clone();
    }
    let mut shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
    shape[axis] = new_len;
    let mut out = Array3::<f32>::zeros(shape);
    for j in 0..new_len {
        let s = source_coord(j, old, new, len);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let w = (s - i0 as f64) as f32;
        let a = data.index_axis(Axis(axis), i0);
        let b = data.index_axis(Axis(axis), i1);
        Zip::from(out.index_axis_mut(Axis(axis), j)).and(&a).and(&b).for_each(|o, &x0, &x1| {
            *o = if w == 0.0 { x0 } else { x0 + (x1 - x0) * w };
        });
    }
    out
}

fn nearest_indices(len: usize, new_len: usize, old: f64, new: f64) -> Vec<usize> {
    (0..new_len).map(|j| ((source_coord(j, old, new, len) + 0.5).floor() as usize).min(len - 1)).collect()
}

fn shifted_origin(g: &Geometry, new_spacing: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| g.origin[a] - 0.5 * g.spacing[a] + 0.5 * new_spacing[a])
}

fn resample_grid(volume: &CtVolume, shape: [usize; 3], spacing: [f64; 3]) -> CtVolume {
    let g = volume.geometry();
    let mut data = volume.voxels().clone();
    for a in 0..3 {
        data = linear_axis(&data, a, shape[a], g.spacing[a], spacing[a]);
    }
    CtVolume { voxels: data, geometry: Geometry { spacing, origin: shifted_origin(&g, spacing) }, normalized: volume.is_normalized() }
}

fn resample_mask_grid(mask: &LungMask, shape: [usize; 3], spacing: [f64; 3]) -> LungMask {
    let g = mask.geometry();
    let mut data = mask.voxels().clone();
    for a in 0..3 {
        let idx = nearest_indices(data.len_of(Axis(a)), shape[a], g.spacing[a], spacing[a]);
        data = data.select(Axis(a), &idx);
    }
    LungMask { voxels: data, geometry: Geometry { spacing, origin: shifted_origin(&g, spacing) } }
}

fn extent_preserving_spacing(shape: [usize; 3], spacing: [f64; 3], target: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| shape[a] as f64 * spacing[a] / target[a] as f64)
}

/// Trilinear resize of a volume to `shape`, preserving its world extent.
pub fn resample_volume_to_shape(volume: &CtVolume, shape: [usize; 3]) -> Result<CtVolume> {
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("target shape {shape:?} has an empty axis")));
    }
    let spacing = extent_preserving_spacing(volume.shape(), volume.spacing(), shape);
    Ok(resample_grid(volume, shape, spacing))
}

/// Nearest-neighbour resize of a mask to `shape`, preserving its world extent.
pub fn resample_mask_to_shape(mask: &LungMask, shape: [usize; 3]) -> Result<LungMask> {
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("target shape {shape:?} has an empty axis")));
    }
    let spacing = extent_preserving_spacing(mask.shape(), mask.geometry().spacing, shape);
    Ok(resample_mask_grid(mask, shape, spacing))
}

/// Resample to 1 mm isotropic spacing, then resize to a `cube`³ grid.
pub fn resample_to_canonical(volume: &CtVolume, mask: Option<&LungMask>, cube: usize) -> Result<Resampled> {
    if cube == 0 {
        return Err(Error::InvalidArgument("canonical cube size must be positive".into()));
    }
    if let Some(m) = mask {
        m.check_aligned(volume)?;
        if m.geometry() != volume.geometry() {
            return Err(Error::ShapeMismatch("mask geometry differs from volume geometry".into()));
        }
    }
    let mut warnings = Vec::new();
    let shape = volume.shape();
    let spacing = volume.spacing();
    let iso_shape = [0, 1, 2].map(|a| ((shape[a] as f64 * spacing[a]).round() as usize).max(1));
    for a in 0..3 {
        if shape[a] == 1 && (iso_shape[a] > 1 || cube > 1) {
            warnings.push(format!("axis {a} has a single voxel; resampled values are replicated along it"));
        }
    }
    let iso = resample_grid(volume, iso_shape, [1.0; 3]);
    let iso_mask = mask.map(|m| resample_mask_grid(m, iso_shape, [1.0; 3]));

    let target = [cube; 3];
    let out = resample_volume_to_shape(&iso, target)?;
    let out_mask = iso_mask.map(|m| resample_mask_to_shape(&m, target)).transpose()?;
    Ok(Resampled { volume: out, mask: out_mask, warnings })
}
