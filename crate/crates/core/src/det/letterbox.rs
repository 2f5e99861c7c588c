use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Aspect-preserving resize into a square canvas, centred, zero padded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    /// Source `(height, width)`.
    pub source: [usize; 2],
    pub size: usize,
    /// Resized `(height, width)` inside the canvas.
    pub inner: [usize; 2],
    /// Top-left offset `(y, x)` of the resized image.
    pub pad: [usize; 2],
}

impl Letterbox {
    pub fn new(height: usize, width: usize, size: usize) -> Result<Self> {
        if height == 0 || width == 0 || size == 0 {
            return Err(Error::ShapeMismatch(format!("cannot letterbox a {height}x{width} image into {size}")));
        }
        let scale = size as f64 / height.max(width) as f64;
        let ih = ((height as f64 * scale).round() as usize).clamp(1, size);
        let iw = ((width as f64 * scale).round() as usize).clamp(1, size);
        Ok(Self { source: [height, width], size, inner: [ih, iw], pad: [(size - ih) / 2, (size - iw) / 2] })
    }

    pub fn apply(&self, image: &Array2<f32>) -> Result<Array2<f32>> {
        let (h, w) = image.dim();
        if [h, w] != self.source {
            return Err(Error::ShapeMismatch(format!("letterbox built for {:?}, image is {h}x{w}", self.source)));
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, image.iter().copied().collect()).expect("buffer length matches the image");
        let small = if self.inner == self.source { buf } else { resize(&buf, self.inner[1] as u32, self.inner[0] as u32, FilterType::Triangle) };
        let mut out = Array2::zeros((self.size, self.size));
        for (x, y, p) in small.enumerate_pixels() {
            out[[self.pad[0] + y as usize, self.pad[1] + x as usize]] = p[0];
        }
        Ok(out)
    }

    fn axis(&self, i: usize) -> (f64, f64) {
        // canvas_px = src_px * scale + pad
        (self.inner[i] as f64 / self.source[i] as f64, self.pad[i] as f64)
    }

    /// Box normalised to the source image -> box normalised to the canvas.
    pub fn to_canvas(&self, b: &BBox) -> BBox {
        let (sy, py) = self.axis(0);
        let (sx, px) = self.axis(1);
        let (h, w, n) = (self.source[0] as f64, self.source[1] as f64, self.size as f64);
        BBox::new((b.cx * w * sx + px) / n, (b.cy * h * sy + py) / n, b.w * w * sx / n, b.h * h * sy / n)
    }

    /// Inverse of [`Letterbox::to_canvas`], clamped to the source image.
    pub fn to_source(&self, b: &BBox) -> BBox {
        let (sy, py) = self.axis(0);
        let (sx, px) = self.axis(1);
        let (h, w, n) = (self.source[0] as f64, self.source[1] as f64, self.size as f64);
        BBox::new((b.cx * n - px) / (sx * w), (b.cy * n - py) / (sy * h), b.w * n / (sx * w), b.h * n / (sy * h)).clamped(1.0, 1.0)
    }
}
