//! Geometry-aware CT volume primitives.
//!
//! Axis order is `(z, y, x)` for every array, spacing and origin in this
//! crate. Spacing is in millimetres per voxel and the origin is the world
//! position (mm) of the centre of voxel `(0, 0, 0)`.

mod components;
mod geometry;
mod intensity;
mod resample;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use components::keep_largest_components;
pub use geometry::{common_crop_shape, crop_foreground, extract_axial_slice, pad_to_shape, voxel_to_world, world_to_voxel, CropBox};
pub use intensity::{binarize_lung_mask, clip_and_normalize_hu, hu_to_unit, HU_WINDOW_MAX, HU_WINDOW_MIN};
pub use resample::{resample_mask_to_shape, resample_to_canonical, resample_volume_to_shape, Resampled};

/// Voxel spacing and world origin, both `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { spacing, origin })
    }

    pub fn unit() -> Self {
        Self { spacing: [1.0; 3], origin: [0.0; 3] }
    }
}

fn shape3<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// A scalar CT grid: Hounsfield units before normalisation, `[0, 1]` after.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    voxels: Array3<f32>,
    geometry: Geometry,
    normalized: bool,
}

impl CtVolume {
    /// A volume in Hounsfield units.
    pub fn new(voxels: Array3<f32>, geometry: Geometry) -> Result<Self> {
        Self::build(voxels, geometry, false)
    }

    /// A volume whose values are already in `[0, 1]`.
    pub fn new_normalized(voxels: Array3<f32>, geometry: Geometry) -> Result<Self> {
        if let Some(v) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("normalized volume holds out-of-range value {v}")));
        }
        Self::build(voxels, geometry, true)
    }

    fn build(voxels: Array3<f32>, geometry: Geometry, normalized: bool) -> Result<Self> {
        if voxels.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume grid {:?} has an empty axis", voxels.shape())));
        }
        let geometry = Geometry::new(geometry.spacing, geometry.origin)?;
        Ok(Self { voxels, geometry, normalized })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<f32> {
        self.voxels
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.voxels)
    }

    /// Physical size `shape * spacing` per axis in mm.
    pub fn extent(&self) -> [f64; 3] {
        let s = self.shape();
        [0, 1, 2].map(|a| s[a] as f64 * self.geometry.spacing[a])
    }
}

/// Binary lung mask aligned with a [`CtVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LungMask {
    voxels: Array3<u8>,
    geometry: Geometry,
}

impl LungMask {
    pub fn new(voxels: Array3<u8>, geometry: Geometry) -> Result<Self> {
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        if voxels.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("mask grid has an empty axis".into()));
        }
        Ok(Self { voxels, geometry: Geometry::new(geometry.spacing, geometry.origin)? })
    }

    pub fn empty_like(volume: &CtVolume) -> Self {
        Self { voxels: Array3::zeros(volume.voxels.raw_dim()), geometry: volume.geometry }
    }

    pub fn voxels(&self) -> &Array3<u8> {
        &self.voxels
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.voxels)
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn contains(&self, index: [usize; 3]) -> bool {
        self.voxels.get(index).is_some_and(|&v| v == 1)
    }

    /// Error unless the mask shares the volume's grid shape.
    pub fn check_aligned(&self, volume: &CtVolume) -> Result<()> {
        if self.shape() != volume.shape() {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs volume {:?}", self.shape(), volume.shape())));
        }
        Ok(())
    }
}

/// One axial plane with its in-plane `(y, x)` spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialSlice {
    pub pixels: Array2<f32>,
    pub spacing: [f64; 2],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_construction() {
        assert!(Geometry::new([1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(CtVolume::new(Array3::zeros((0, 2, 2)), Geometry::unit()).is_err());
        assert!(CtVolume::new_normalized(Array3::from_elem((1, 1, 1), 1.5), Geometry::unit()).is_err());
        assert!(LungMask::new(Array3::from_elem((1, 1, 1), 2), Geometry::unit()).is_err());
    }
}
