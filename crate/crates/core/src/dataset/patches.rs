use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Malignancy, NoduleAnnotation};
use crate::error::{Error, Result};
use crate::imaging::CtVolume;

/// Side length of classifier patches.
pub const PATCH_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct NodulePatch {
    pub pixels: Array2<f32>,
    pub label: Malignancy,
    pub source: PatchSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub series_id: String,
    pub index: usize,
}

/// `PATCH_SIZE`² axial crop centred on voxel `(z, y, x)`, so that the centre
/// voxel lands at pixel `(PATCH_SIZE / 2, PATCH_SIZE / 2)`. Pixels outside
/// the volume are zero.
pub fn crop_patch(volume: &CtVolume, center: [usize; 3]) -> Result<Array2<f32>> {
    let [d, h, w] = volume.shape();
    for (a, (&c, n)) in center.iter().zip([d, h, w]).enumerate() {
        if c >= n {
            return Err(Error::OutOfBounds { axis: a, index: c as f64, size: n });
        }
    }
    let half = (PATCH_SIZE / 2) as isize;
    let plane = volume.voxels().index_axis(ndarray::Axis(0), center[0]);
    Ok(Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |(i, j)| {
        let y = center[1] as isize - half + i as isize;
        let x = center[2] as isize - half + j as isize;
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            plane[[y as usize, x as usize]]
        } else {
            0.0
        }
    }))
}

/// Nearest voxel to a continuous index, clamped to the grid.
pub fn nearest_voxel(index: [f64; 3], shape: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| (index[a].round().max(0.0) as usize).min(shape[a] - 1))
}

/// Classifier patch from the central axial slice of an annotated nodule.
pub fn extract_classifier_patch(volume: &CtVolume, annotation: &NoduleAnnotation, index: usize) -> Result<NodulePatch> {
    if !volume.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let label = annotation
        .malignancy
        .ok_or_else(|| Error::InvalidArgument(format!("annotation {index} of {} has no malignancy label", annotation.series_id)))?;
    let idx = volume.geometry().world_to_voxel(annotation.center, volume.shape())?;
    let pixels = crop_patch(volume, nearest_voxel(idx, volume.shape()))?;
    Ok(NodulePatch { pixels, label, source: PatchSource { series_id: annotation.series_id.clone(), index } })
}
