use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Output pixels per slice pixel.
pub const OVERLAY_SCALE: u32 = 4;

const CONTOUR: Rgb<u8> = Rgb([0, 220, 0]);
const BOX: Rgb<u8> = Rgb([255, 40, 40]);
const TEXT: Rgb<u8> = Rgb([255, 255, 0]);

/// One box to draw, with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlayBox {
    /// Normalised to the slice.
    pub bbox: BBox,
    pub score: f64,
    pub label: Option<String>,
}

impl OverlayBox {
    pub fn caption(&self) -> String {
        match &self.label {
            Some(l) => format!("{:.2} {l}", self.score),
            None => format!("{:.2}", self.score),
        }
    }
}

/// 3x5 glyphs, one row per `u8` (low three bits, msb left).
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'G' => [7, 4, 5, 5, 7],
        'I' => [7, 2, 2, 2, 7],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'T' => [7, 2, 2, 2, 2],
        _ => [0; 5],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str) {
    for (k, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    put(img, x + 4 * k as i64 + col, y + row as i64, TEXT);
                }
            }
        }
    }
}

/// Pixel rectangle `[x0, y0, x1, y1]` (inclusive) of a normalised box on
/// the scaled canvas.
pub fn box_pixels(b: &BBox, height: usize, width: usize) -> [i64; 4] {
    let [x0, y0, x1, y1] = b.scaled(width as f64, height as f64).corners();
    let s = f64::from(OVERLAY_SCALE);
    [(x0 * s).round() as i64, (y0 * s).round() as i64, (x1 * s).round() as i64 - 1, (y1 * s).round() as i64 - 1]
}

/// Grey slice with the mask outline, detection boxes and captions.
pub fn overlay_image(slice: &Array2<f32>, mask: Option<ArrayView2<u8>>, boxes: &[OverlayBox]) -> Result<RgbImage> {
    let (h, w) = slice.dim();
    if let Some(m) = &mask {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs slice {:?}", m.dim(), (h, w))));
        }
    }
    let s = OVERLAY_SCALE;
    let mut img = RgbImage::from_fn(w as u32 * s, h as u32 * s, |x, y| {
        let v = (slice[[(y / s) as usize, (x / s) as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    if let Some(m) = mask {
        let inside = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]] != 0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let edge = inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(y + dy, x + dx));
                if edge {
                    for k in 0..s as i64 {
                        for j in 0..s as i64 {
                            put(&mut img, x * s as i64 + j, y * s as i64 + k, CONTOUR);
                        }
                    }
                }
            }
        }
    }
    for b in boxes {
        let [x0, y0, x1, y1] = box_pixels(&b.bbox, h, w);
        for x in x0..=x1 {
            put(&mut img, x, y0, BOX);
            put(&mut img, x, y1, BOX);
        }
        for y in y0..=y1 {
            put(&mut img, x0, y, BOX);
            put(&mut img, x1, y, BOX);
        }
        let ty = if y0 >= 7 { y0 - 7 } else { y1 + 2 };
        draw_text(&mut img, x0, ty, &b.caption());
    }
    Ok(img)
}

/// Write [`overlay_image`] as a PNG.
pub fn render_overlay(slice: &Array2<f32>, mask: Option<ArrayView2<u8>>, boxes: &[OverlayBox], out_path: &Path) -> Result<()> {
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    overlay_image(slice, mask, boxes)?.save(out_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_mask() -> Array2<u8> {
        Array2::from_shape_fn((20, 24), |(y, x)| u8::from((y as i64 - 10).pow(2) + (x as i64 - 12).pow(2) <= 36))
    }

    #[test]
    fn no_boxes_draws_only_the_contour() {
        let slice = Array2::from_elem((20, 24), 0.5f32);
        let img = overlay_image(&slice, Some(disc_mask().view()), &[]).unwrap();
        assert_eq!(img.dimensions(), (96, 80));
        let colours: std::collections::BTreeSet<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        assert_eq!(colours, [[128, 128, 128], CONTOUR.0].into_iter().collect());
        // interior stays grey
        assert_eq!(img.get_pixel(12 * 4, 10 * 4).0, [128, 128, 128]);
    }

    #[test]
    fn box_outline_lands_on_denormalised_corners() {
        let slice = Array2::zeros((20, 24));
        let b = OverlayBox { bbox: BBox::from_corners([6.0 / 24.0, 5.0 / 20.0, 12.0 / 24.0, 9.0 / 20.0]), score: 0.87, label: Some("M".into()) };
        let img = overlay_image(&slice, None, &[b.clone()]).unwrap();
        assert_eq!(box_pixels(&b.bbox, 20, 24), [24, 20, 47, 35]);
        assert_eq!(img.get_pixel(24, 20).0, BOX.0);
        assert_eq!(img.get_pixel(47, 35).0, BOX.0);
        assert_eq!(img.get_pixel(30, 30).0, [0, 0, 0]);
        assert!(img.pixels().any(|p| p.0 == TEXT.0));
        assert_eq!(b.caption(), "0.87 M");
    }

    #[test]
    fn bytes_are_deterministic_and_bad_paths_fail() {
        let dir = tempfile::tempdir().unwrap();
        let slice = Array2::from_shape_fn((20, 24), |(y, x)| (y * x) as f32 / 500.0);
        let boxes = [OverlayBox { bbox: BBox::new(0.5, 0.5, 0.2, 0.2), score: 0.5, label: None }];
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_overlay(&slice, Some(disc_mask().view()), &boxes, &a).unwrap();
        render_overlay(&slice, Some(disc_mask().view()), &boxes, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        assert!(render_overlay(&slice, None, &boxes, &blocker.join("x.png")).is_err());
        assert!(overlay_image(&slice, Some(Array2::zeros((3, 3)).view()), &[]).is_err());
    }
}
