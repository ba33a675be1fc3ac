//! Radial-directional local intuitionistic fuzzy entropy (LIFE) edges.
//!
//! The image gradient is projected onto the ray from the ultrasound sector
//! apex, so only boundaries that face the probe (and therefore reflect) are
//! kept. Normalized radial gradients are fuzzified into
//! membership/non-membership/hesitation triples, their intuitionistic
//! entropy is accumulated over a small neighborhood, signed by the radial
//! gradient direction and soft-thresholded. The result is added to the CT
//! slice to mimic the bright reflecting boundaries of ultrasound.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{gradient_xy, Image2D, SectorGeometry};

/// Intuitionistic fuzzy description of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzyPixel {
    /// Membership.
    pub mu: f64,
    /// Non-membership.
    pub phi: f64,
    /// Hesitation, `1 - mu - phi`.
    pub pi: f64,
}

impl FuzzyPixel {
    /// Per-element intuitionistic fuzzy entropy
    /// `(2 mu phi + pi^2) / (mu^2 + phi^2 + pi^2)`.
    #[inline]
    pub fn entropy_term(&self) -> f64 {
        let num = 2.0 * self.mu * self.phi + self.pi * self.pi;
        let den = self.mu * self.mu + self.phi * self.phi + self.pi * self.pi;
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifeParams {
    /// Fuzzification exponent.
    pub lambda: u32,
    /// Odd side of the entropy neighborhood.
    pub neighborhood_n: usize,
    /// Soft threshold applied to the signed neighborhood entropy sum.
    pub soft_threshold: f64,
    /// Multiplier applied to the edge map before it is added to the slice.
    pub enhancement_gain: f64,
}

impl Default for LifeParams {
    fn default() -> Self {
        Self {
            lambda: 4,
            neighborhood_n: 3,
            soft_threshold: 1.5,
            enhancement_gain: 1.0,
        }
    }
}

impl LifeParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 1 {
            return Err(Error::param("lambda", "must be >= 1"));
        }
        if self.neighborhood_n < 3 || self.neighborhood_n % 2 == 0 {
            return Err(Error::param(
                "neighborhood_n",
                format!("must be odd and >= 3, got {}", self.neighborhood_n),
            ));
        }
        if !(self.soft_threshold >= 0.0) {
            return Err(Error::param("soft_threshold", "must be >= 0"));
        }
        if !self.enhancement_gain.is_finite() {
            return Err(Error::param("enhancement_gain", "must be finite"));
        }
        Ok(())
    }
}

/// `|g| / max|g|`; an all-zero input stays all-zero.
pub fn normalize_gradient(grad: &Image2D) -> Image2D {
    let max = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    normalize_by(grad, max)
}

fn normalize_by(grad: &Image2D, scale: f64) -> Image2D {
    if scale > 0.0 {
        grad.map(|v| (v.abs() / scale).min(1.0))
    } else {
        Image2D::zeros(grad.width(), grad.height())
    }
}

/// `mu = (1-g)^(lambda(lambda+1))`, `phi = 1 - (1-g)^lambda`,
/// `pi = 1 - mu - phi`.
pub fn fuzzify(g_norm: f64, lambda: u32) -> Result<FuzzyPixel> {
    if !(0.0..=1.0).contains(&g_norm) {
        return Err(Error::param("g_norm", format!("must lie in [0, 1], got {g_norm}")));
    }
    if lambda < 1 {
        return Err(Error::param("lambda", "must be >= 1"));
    }
    Ok(fuzzify_unchecked(g_norm, lambda))
}

#[inline]
fn fuzzify_unchecked(g: f64, lambda: u32) -> FuzzyPixel {
    let c = 1.0 - g;
    let c_l = c.powi(lambda as i32);
    let mu = c_l.powi(lambda as i32 + 1);
    let phi = 1.0 - c_l;
    FuzzyPixel {
        mu,
        phi,
        pi: 1.0 - mu - phi,
    }
}

/// Mean entropy term over an `n x n` block (row-major, `n` odd).
pub fn life_entropy(neighborhood: &[FuzzyPixel]) -> Result<f64> {
    let len = neighborhood.len();
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len || n % 2 == 0 {
        return Err(Error::param(
            "neighborhood",
            format!("expected an odd square block, got {len} cells"),
        ));
    }
    Ok(neighborhood.iter().map(FuzzyPixel::entropy_term).sum::<f64>() / len as f64)
}

/// Projects a Cartesian gradient onto the ray from the apex:
/// `g_r = g_x sin(theta) + g_y cos(theta)`.
pub fn radial_projection(gx: &Image2D, gy: &Image2D, geom: &SectorGeometry) -> Result<Image2D> {
    gx.check_same_dims(gy, "gradient components")?;
    let (w, h) = gx.dims();
    let (ax, ay) = geom.apex;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let dy = y as f64 - ay;
        for (x, o) in row.iter_mut().enumerate() {
            let dx = x as f64 - ax;
            let r = dx.hypot(dy);
            if r == 0.0 {
                // the apex itself has no radial direction
                continue;
            }
            // sin/cos of atan2(dx, dy)
            let (s, c) = (dx / r, dy / r);
            let i = y * w + x;
            *o = gx.data()[i] * s + gy.data()[i] * c;
        }
    });
    Ok(Image2D::from_raw(w, h, out))
}

/// Directional derivative of `img` along the ray from the sector apex.
pub fn radial_gradient(img: &Image2D, geom: &SectorGeometry) -> Result<Image2D> {
    let (gx, gy) = gradient_xy(img)?;
    radial_projection(&gx, &gy, geom)
}

/// `e - sgn(e) tau` when `|e| >= tau`, zero otherwise.
#[inline]
pub fn soft_threshold(e: f64, tau: f64) -> f64 {
    if e.abs() >= tau {
        e - e.signum() * tau
    } else {
        0.0
    }
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of `plane` over the `n x n` neighborhood of every pixel, with
/// reflective borders.
fn neighborhood_sum(plane: &[f64], w: usize, h: usize, n: usize) -> Vec<f64> {
    let r = (n / 2) as isize;
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let m = i.rem_euclid(2 * len);
        (if m >= len { 2 * len - 1 - m } else { m }) as usize
    };
    let mut rows = vec![0.0; w * h];
    rows.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let src = &plane[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            *o = (-r..=r).map(|k| src[reflect(x as isize + k, w)]).sum();
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, o)| {
        for k in -r..=r {
            let sy = reflect(y as isize + k, h);
            for (v, s) in o.iter_mut().zip(&rows[sy * w..(sy + 1) * w]) {
                *v += s;
            }
        }
    });
    out
}

/// Radial LIFE edge map of a CT slice.
///
/// Steps: Cartesian gradient, radial projection, normalization, fuzzify,
/// neighborhood entropy sum (the `n x n` sum, so the value ranges over
/// `[0, n*n]`), sign of the radial gradient, soft threshold.
///
/// The radial gradient is normalized by the largest Cartesian gradient
/// magnitude of the slice, so boundaries running along the rays stay near
/// zero instead of being rescaled to full strength.
pub fn extract_edges(img: &Image2D, geom: &SectorGeometry, params: &LifeParams) -> Result<Image2D> {
    params.validate()?;
    let (w, h) = img.dims();
    let (gx, gy) = gradient_xy(img)?;
    let radial = radial_projection(&gx, &gy, geom)?;
    let scale = gx
        .data()
        .iter()
        .zip(gy.data())
        .fold(0.0f64, |m, (a, b)| m.max(a.hypot(*b)));
    let g = normalize_by(&radial, scale);
    let lambda = params.lambda;
    let terms: Vec<f64> = g
        .data()
        .par_iter()
        .map(|&v| fuzzify_unchecked(v, lambda).entropy_term())
        .collect();
    let sums = neighborhood_sum(&terms, w, h, params.neighborhood_n);
    let tau = params.soft_threshold;
    let out: Vec<f64> = sums
        .par_iter()
        .zip(radial.data().par_iter())
        .map(|(&e, &gr)| soft_threshold(sgn(gr) * e, tau))
        .collect();
    Ok(Image2D::from_raw(w, h, out))
}

/// `clamp(slice + gain * edges, 0, 1)`.
pub fn enhance_slice(slice: &Image2D, edges: &Image2D, gain: f64) -> Result<Image2D> {
    slice.check_same_dims(edges, "slice vs edge map")?;
    let data = slice
        .data()
        .iter()
        .zip(edges.data())
        .map(|(s, e)| (s + gain * e).clamp(0.0, 1.0))
        .collect();
    let mut out = Image2D::from_raw(slice.width(), slice.height(), data);
    out.spacing = slice.spacing;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn geom(apex: (f64, f64)) -> SectorGeometry {
        SectorGeometry::new(apex, 5.0, 500.0, 1.2).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let z = Image2D::zeros(3, 1);
        assert_eq!(normalize_gradient(&z).data(), &[0.0; 3]);
        let g = Image2D::new(3, 1, vec![-2.0, 1.0, 4.0]).unwrap();
        assert_eq!(normalize_gradient(&g).data(), &[0.5, 0.25, 1.0]);
        let g = Image2D::new(2, 1, vec![-5.0, 1.0]).unwrap();
        assert_eq!(normalize_gradient(&g).get(0, 0), 1.0);
    }

    #[test]
    fn fuzzify_examples() {
        assert_eq!(fuzzify(0.0, 4).unwrap(), FuzzyPixel { mu: 1.0, phi: 0.0, pi: 0.0 });
        assert_eq!(fuzzify(1.0, 4).unwrap(), FuzzyPixel { mu: 0.0, phi: 1.0, pi: 0.0 });
        let f = fuzzify(0.5, 4).unwrap();
        assert!((f.mu - 9.5367431640625e-7).abs() < 1e-18);
        assert_eq!(f.phi, 0.9375);
        assert!((f.pi - 0.06249904632568359).abs() < 1e-15);
        assert!(fuzzify(1.1, 4).is_err());
        assert!(fuzzify(-0.1, 4).is_err());
    }

    #[test]
    fn life_entropy_examples() {
        let flat = vec![fuzzify(0.0, 4).unwrap(); 9];
        assert_eq!(life_entropy(&flat).unwrap(), 0.0);
        let edge = vec![fuzzify(1.0, 4).unwrap(); 9];
        assert_eq!(life_entropy(&edge).unwrap(), 0.0);
        let half = vec![fuzzify(0.5, 4).unwrap(); 9];
        let e = life_entropy(&half).unwrap();
        assert!((e - 4.427e-3).abs() < 5e-7, "{e}");
        assert!(life_entropy(&flat[..8]).is_err());
        assert!(life_entropy(&vec![fuzzify(0.0, 4).unwrap(); 4]).is_err());
    }

    #[test]
    fn soft_threshold_table() {
        assert_eq!(soft_threshold(2.0, 1.5), 0.5);
        assert_eq!(soft_threshold(-2.0, 1.5), -0.5);
        assert_eq!(soft_threshold(1.4, 1.5), 0.0);
        assert_eq!(soft_threshold(1.5, 1.5), 0.0);
    }

    #[test]
    fn radial_projection_special_angles() {
        let g = geom((2.0, 0.0));
        let gx = Image2D::filled(5, 5, 3.0);
        let gy = Image2D::filled(5, 5, 7.0);
        let r = radial_projection(&gx, &gy, &g).unwrap();
        // directly below the apex: theta = 0
        assert!((r.get(2, 3) - 7.0).abs() < 1e-12);
        // apex row, right of the apex: theta = pi/2
        let gx = Image2D::filled(5, 5, 1.0);
        let gy = Image2D::zeros(5, 5);
        let r = radial_projection(&gx, &gy, &g).unwrap();
        assert!((r.get(4, 0) - 1.0).abs() < 1e-12);
        assert!((g.deflection_angle(4.0, 0.0) - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(r.get(2, 0), 0.0);
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Image2D::filled(16, 16, 0.4);
        let e = extract_edges(&img, &geom((8.0, -4.0)), &LifeParams::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhance_examples() {
        let s = Image2D::filled(3, 3, 0.5);
        let mut e = Image2D::zeros(3, 3);
        assert_eq!(enhance_slice(&s, &e, 1.0).unwrap(), s);
        e.set(1, 1, 0.3);
        assert_eq!(enhance_slice(&s, &e, 0.0).unwrap(), s);
        let out = enhance_slice(&s, &e, 1.0).unwrap();
        assert!((out.get(1, 1) - 0.8).abs() < 1e-15);
        assert_eq!(out.get(0, 0), 0.5);
        e.set(0, 0, 9.0);
        assert_eq!(enhance_slice(&s, &e, 1.0).unwrap().get(0, 0), 1.0);
        assert!(enhance_slice(&s, &Image2D::zeros(3, 2), 1.0).is_err());
    }

    #[test]
    fn params_validation() {
        let p = LifeParams {
            neighborhood_n: 4,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = LifeParams {
            soft_threshold: -1.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
