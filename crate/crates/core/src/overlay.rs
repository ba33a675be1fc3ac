//! Two-image color fusion for visual inspection of a registration.

use crate::error::Result;
use crate::grid::Image2D;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        crate::io::encode_ppm(self.width, self.height, &self.pixels)
    }
}

/// `[0, 1]` to `0..=255`, clamped and rounded.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `a` in red, `b` in green, their mean in blue.
pub fn fuse_overlay(a: &Image2D, b: &Image2D) -> Result<RgbImage> {
    a.check_same_dims(b, "overlay images")?;
    let pixels = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| [quantize(x), quantize(y), quantize(0.5 * (x + y))])
        .collect();
    Ok(RgbImage {
        width: a.width(),
        height: a.height(),
        pixels,
    })
}
