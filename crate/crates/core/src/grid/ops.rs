//! Sampling, resampling and filtering kernels shared by every stage.
//!
//! Border policies: sampling clamps to the image border, convolution
//! reflects (half-sample symmetric), gradients switch to one-sided
//! differences on the outermost rows and columns.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DeformationField2D, Image2D, Volume3D};

#[inline]
pub(crate) fn bilinear_cell(w: usize, h: usize, x: f64, y: f64) -> (usize, usize, f64, f64) {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    // truncation is floor here, both coordinates are non-negative
    let x0 = (xc as usize).min(w.saturating_sub(2));
    let y0 = (yc as usize).min(h.saturating_sub(2));
    (x0, y0, xc - x0 as f64, yc - y0 as f64)
}

#[inline]
pub(crate) fn bilinear_mix(p: &[f64], w: usize, h: usize, x0: usize, y0: usize, fx: f64, fy: f64) -> f64 {
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let r0 = y0 * w;
    let r1 = y1 * w;
    // weighted form, exact on grid nodes
    let top = (1.0 - fx) * p[r0 + x0] + fx * p[r0 + x1];
    let bottom = (1.0 - fx) * p[r1 + x0] + fx * p[r1 + x1];
    (1.0 - fy) * top + fy * bottom
}

/// Bilinear interpolation at continuous `(x, y)`; coordinates are clamped
/// to `[0, w-1] x [0, h-1]`.
pub fn bilinear_sample(img: &Image2D, x: f64, y: f64) -> f64 {
    let (w, h) = img.dims();
    let (x0, y0, fx, fy) = bilinear_cell(w, h, x, y);
    bilinear_mix(img.data(), w, h, x0, y0, fx, fy)
}

/// Pulls `img` through the field: `out(p) = img(p + field(p))`.
pub fn warp(img: &Image2D, field: &DeformationField2D) -> Result<Image2D> {
    field.check_dims(img.dims(), "warp field vs image")?;
    let (w, h) = img.dims();
    let src = img.data();
    let (vx, vy) = (field.vx(), field.vy());
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let (x0, y0, fx, fy) = bilinear_cell(w, h, x as f64 + vx[i], y as f64 + vy[i]);
            *o = bilinear_mix(src, w, h, x0, y0, fx, fy);
        }
    });
    let mut out = Image2D::from_raw(w, h, out);
    out.spacing = img.spacing;
    Ok(out)
}

/// Finite-difference gradients `(d/dx, d/dy)`: central differences inside,
/// one-sided differences on the border.
pub fn gradient_xy(img: &Image2D) -> Result<(Image2D, Image2D)> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: 3,
        });
    }
    let u = img.data();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    gx.par_chunks_mut(w).zip(gy.par_chunks_mut(w)).enumerate().for_each(|(y, (rx, ry))| {
        let row = &u[y * w..(y + 1) * w];
        rx[0] = row[1] - row[0];
        rx[w - 1] = row[w - 1] - row[w - 2];
        for x in 1..w - 1 {
            rx[x] = 0.5 * (row[x + 1] - row[x - 1]);
        }
        if y == 0 {
            for x in 0..w {
                ry[x] = u[w + x] - u[x];
            }
        } else if y == h - 1 {
            for x in 0..w {
                ry[x] = u[y * w + x] - u[(y - 1) * w + x];
            }
        } else {
            for x in 0..w {
                ry[x] = 0.5 * (u[(y + 1) * w + x] - u[(y - 1) * w + x]);
            }
        }
    });
    Ok((Image2D::from_raw(w, h, gx), Image2D::from_raw(w, h, gy)))
}

pub fn extract_slice(vol: &Volume3D, k: usize) -> Result<Image2D> {
    if k >= vol.depth() {
        return Err(Error::OutOfRange {
            index: k,
            len: vol.depth(),
        });
    }
    let mut img = Image2D::from_raw(vol.width(), vol.height(), vol.slice_data(k).to_vec());
    img.spacing = (vol.spacing.0, vol.spacing.1);
    Ok(img)
}

/// Normalized, truncated Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let two_s2 = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / two_s2).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

// Both passes pair the taps `r - j` and `r + j`; the kernel is exactly
// symmetric, so this halves the multiplications.
fn convolve_rows(src: &[f64], w: usize, kernel: &[f64], dst: &mut [f64]) {
    let r = kernel.len() / 2;
    dst.par_chunks_mut(w).enumerate().for_each_init(Vec::new, |padded, (y, out)| {
        let row = &src[y * w..(y + 1) * w];
        padded.clear();
        padded.extend((-(r as isize)..(w + r) as isize).map(|i| row[reflect(i, w)]));
        let kc = kernel[r];
        for (o, s) in out.iter_mut().zip(&padded[r..r + w]) {
            *o = kc * s;
        }
        for j in 1..=r {
            let kw = kernel[r + j];
            for ((o, a), b) in out.iter_mut().zip(&padded[r - j..r - j + w]).zip(&padded[r + j..r + j + w]) {
                *o += kw * (a + b);
            }
        }
    });
}

fn convolve_cols(src: &[f64], w: usize, h: usize, kernel: &[f64], dst: &mut [f64]) {
    let r = kernel.len() / 2;
    let row = |k: isize| {
        let sy = reflect(k, h);
        &src[sy * w..(sy + 1) * w]
    };
    dst.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let kc = kernel[r];
        for (o, s) in out.iter_mut().zip(row(y as isize)) {
            *o = kc * s;
        }
        for j in 1..=r {
            let kw = kernel[r + j];
            let (above, below) = (row(y as isize - j as isize), row((y + j) as isize));
            for ((o, a), b) in out.iter_mut().zip(above).zip(below) {
                *o += kw * (a + b);
            }
        }
    });
}

pub(crate) fn blur_plane(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return src.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let mut tmp = vec![0.0; w * h];
    let mut out = vec![0.0; w * h];
    convolve_rows(src, w, &kernel, &mut tmp);
    convolve_cols(&tmp, w, h, &kernel, &mut out);
    out
}

/// Separable Gaussian blur with reflective boundaries; `sigma == 0` is the
/// identity.
pub fn gaussian_blur(img: &Image2D, sigma: f64) -> Result<Image2D> {
    check_sigma(sigma)?;
    let (w, h) = img.dims();
    let mut out = Image2D::from_raw(w, h, blur_plane(img.data(), w, h, sigma));
    out.spacing = img.spacing;
    Ok(out)
}

/// Component-wise Gaussian regularization of a displacement field.
pub fn gaussian_blur_field(field: &DeformationField2D, sigma: f64) -> Result<DeformationField2D> {
    check_sigma(sigma)?;
    let (w, h) = field.dims();
    DeformationField2D::new(
        w,
        h,
        blur_plane(field.vx(), w, h, sigma),
        blur_plane(field.vy(), w, h, sigma),
    )
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

fn window_map(center: f64, width: f64) -> Result<impl Fn(f64) -> f64> {
    if !(width > 0.0 && width.is_finite()) || !center.is_finite() {
        return Err(Error::param("window_width", format!("must be > 0, got {width}")));
    }
    let lo = center - 0.5 * width;
    Ok(move |v: f64| ((v - lo) / width).clamp(0.0, 1.0))
}

/// CT-style windowing: maps `[c - w/2, c + w/2]` linearly onto `[0, 1]`,
/// clamping outside.
pub fn window_level(img: &Image2D, window_center: f64, window_width: f64) -> Result<Image2D> {
    let f = window_map(window_center, window_width)?;
    Ok(img.map(f))
}

pub fn window_level_volume(vol: &Volume3D, window_center: f64, window_width: f64) -> Result<Volume3D> {
    let f = window_map(window_center, window_width)?;
    Ok(vol.map(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::from_fn(w, h, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn bilinear_integer_coordinates_are_exact() {
        let img = random_image(7, 9, 1);
        assert_eq!(bilinear_sample(&img, 3.0, 5.0), img.get(3, 5));
        assert_eq!(bilinear_sample(&img, 6.0, 8.0), img.get(6, 8));
    }

    #[test]
    fn bilinear_midpoint_and_2x2() {
        let mut img = Image2D::zeros(4, 2);
        img.set(1, 0, 0.0);
        img.set(2, 0, 10.0);
        assert_eq!(bilinear_sample(&img, 1.5, 0.0), 5.0);

        let sq = Image2D::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((bilinear_sample(&sq, 0.5, 0.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let sq = Image2D::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&sq, -5.0, -5.0), 0.0);
        assert_eq!(bilinear_sample(&sq, 9.0, 9.0), 3.0);
        assert_eq!(bilinear_sample(&sq, 9.0, 0.0), 1.0);
    }

    #[test]
    fn bilinear_single_pixel_image() {
        let one = Image2D::filled(1, 1, 4.0);
        assert_eq!(bilinear_sample(&one, 0.3, -2.0), 4.0);
    }

    #[test]
    fn warp_zero_field_is_identity() {
        let img = random_image(16, 12, 2);
        let out = warp(&img, &DeformationField2D::zeros(16, 12)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_uniform_shift_of_ramp() {
        let w = 10;
        let img = Image2D::from_fn(w, 4, |x, _| x as f64);
        let out = warp(&img, &DeformationField2D::uniform(w, 4, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..w {
                assert_eq!(out.get(x, y), ((x + 1).min(w - 1)) as f64);
            }
        }
    }

    #[test]
    fn warp_matches_per_pixel_loop() {
        let img = random_image(16, 16, 3);
        let field = DeformationField2D::from_fn(16, 16, |x, y| {
            (1.5 * (x as f64 * 0.3).sin(), -1.2 * (y as f64 * 0.2).cos())
        });
        let out = warp(&img, &field).unwrap();
        // reference: explicit four-neighbour formula with clamping
        for y in 0..16 {
            for x in 0..16 {
                let (dx, dy) = field.get(x, y);
                let px = (x as f64 + dx).clamp(0.0, 15.0);
                let py = (y as f64 + dy).clamp(0.0, 15.0);
                let x0 = px.floor().min(14.0);
                let y0 = py.floor().min(14.0);
                let (ax, ay) = (px - x0, py - y0);
                let (xi, yi) = (x0 as usize, y0 as usize);
                let expect = img.get(xi, yi) * (1.0 - ax) * (1.0 - ay)
                    + img.get(xi + 1, yi) * ax * (1.0 - ay)
                    + img.get(xi, yi + 1) * (1.0 - ax) * ay
                    + img.get(xi + 1, yi + 1) * ax * ay;
                assert!((out.get(x, y) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_dimension_mismatch() {
        let img = random_image(8, 8, 4);
        assert!(warp(&img, &DeformationField2D::zeros(8, 7)).is_err());
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let c = Image2D::filled(6, 5, 3.0);
        let (gx, gy) = gradient_xy(&c).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let ramp = Image2D::from_fn(8, 6, |x, _| 2.0 * x as f64);
        let (gx, gy) = gradient_xy(&ramp).unwrap();
        assert!(gx.data().iter().all(|&v| v == 2.0));
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_difference_loop() {
        let img = random_image(8, 8, 5);
        let (gx, gy) = gradient_xy(&img).unwrap();
        for y in 0..8usize {
            for x in 0..8usize {
                let ex = match x {
                    0 => img.get(1, y) - img.get(0, y),
                    7 => img.get(7, y) - img.get(6, y),
                    _ => (img.get(x + 1, y) - img.get(x - 1, y)) / 2.0,
                };
                let ey = match y {
                    0 => img.get(x, 1) - img.get(x, 0),
                    7 => img.get(x, 7) - img.get(x, 6),
                    _ => (img.get(x, y + 1) - img.get(x, y - 1)) / 2.0,
                };
                assert!((gx.get(x, y) - ex).abs() < 1e-12);
                assert!((gy.get(x, y) - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_rejects_small_images() {
        assert!(matches!(
            gradient_xy(&Image2D::zeros(2, 5)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn extract_slice_cases() {
        let v = Volume3D::from_fn(4, 3, 10, |_, _, z| z as f64);
        let s = extract_slice(&v, 7).unwrap();
        assert!(s.data().iter().all(|&p| p == 7.0));
        assert!(extract_slice(&v, 10).is_err());

        let single = Volume3D::from_fn(4, 3, 1, |x, y, _| (x + 10 * y) as f64);
        assert_eq!(extract_slice(&single, 0).unwrap().data(), single.data());
    }

    #[test]
    fn blur_sigma_zero_and_constant() {
        let img = random_image(9, 7, 6);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        let c = Image2D::filled(9, 7, 0.25);
        let b = gaussian_blur(&c, 3.0).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.25).abs() < 1e-14));
        assert!(gaussian_blur(&c, -1.0).is_err());
    }

    #[test]
    fn blur_impulse_center_matches_kernel_product() {
        let mut img = Image2D::zeros(33, 33);
        img.set(16, 16, 1.0);
        let b = gaussian_blur(&img, 2.0).unwrap();
        // independent evaluation of the truncated normalized kernel
        let w: Vec<f64> = (-6..=6).map(|k: i32| (-(k * k) as f64 / 8.0).exp()).collect();
        let s: f64 = w.iter().sum();
        let center = (1.0 / s) * (1.0 / s);
        assert!((b.get(16, 16) - center).abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_mean() {
        let img = random_image(23, 17, 7);
        for sigma in [0.7, 2.0, 5.0, 12.0] {
            let b = gaussian_blur(&img, sigma).unwrap();
            assert!((b.mean() - img.mean()).abs() < 1e-9, "sigma {sigma}");
        }
    }

    #[test]
    fn window_level_examples() {
        let img = Image2D::new(4, 1, vec![40.0, -160.0, -500.0, 140.0]).unwrap();
        let out = window_level(&img, 40.0, 400.0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 0.0, 0.75]);
        assert!(window_level(&img, 40.0, 0.0).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(11, 5), 1);
    }
}
