use ndarray::Array3;

use super::{CtVolume, Geometry, LungMask};
use crate::error::{Error, Result};

pub const HU_WINDOW_MIN: f32 = -1200.0;
pub const HU_WINDOW_MAX: f32 = 600.0;

/// Clip to the lung window and map it affinely onto `[0, 1]`.
#[inline]
pub fn hu_to_unit(hu: f32) -> f32 {
    if hu.is_nan() {
        return 0.0;
    }
    (hu.clamp(HU_WINDOW_MIN, HU_WINDOW_MAX) - HU_WINDOW_MIN) / (HU_WINDOW_MAX - HU_WINDOW_MIN)
}

pub fn clip_and_normalize_hu(volume: &CtVolume) -> Result<CtVolume> {
    if volume.is_normalized() {
        return Err(Error::AlreadyNormalized);
    }
    let voxels = volume.voxels().mapv(hu_to_unit);
    Ok(CtVolume { voxels, geometry: volume.geometry(), normalized: true })
}

/// Labels 3 and 4 (left and right lung) become foreground, everything else
/// background.
pub fn binarize_lung_mask(raw: &Array3<i32>, geometry: Geometry) -> Result<LungMask> {
    let voxels = raw.mapv(|v| u8::from(v == 3 || v == 4));
    LungMask::new(voxels, geometry)
}
