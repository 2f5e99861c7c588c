use std::path::Path;

use image::GrayImage;
use ndarray::Array2;

use crate::error::Result;

/// Quantise `[0, 1]` intensities to 8 bits.
pub fn to_gray8(pixels: &Array2<f32>) -> GrayImage {
    let (h, w) = pixels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([(pixels[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8]))
}

pub fn write_slice_png(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    to_gray8(pixels).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Read an 8-bit grayscale PNG back into `[0, 1]`.
pub fn read_slice_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| f32::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0))
}
