//! Synthetic CT-like and ultrasound-like image pairs with ground-truth
//! deformations and landmarks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{blur_plane, gradient_xy, warp, DeformationField2D, Image2D, Mask2D, SectorGeometry, Volume3D};
use crate::life::radial_projection;

/// A dark vessel cross-section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vessel {
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

/// Ground-truth deformation applied to build the moving image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Deformation {
    None,
    /// `u = A (sin(ky) cos(kx), cos(ky) sin(kx))`, `k = 2 pi / wavelength`;
    /// the largest displacement magnitude is exactly `amplitude`.
    Sinusoidal { amplitude: f64, wavelength: f64 },
    /// `u = amplitude * exp(-|p - c|^2 / (2 sigma^2))`.
    GaussianBump {
        center: (f64, f64),
        amplitude: (f64, f64),
        sigma: f64,
    },
}

/// Acoustic shadow cone behind an occluder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shadow {
    /// Cone axis as a deflection angle from `+y`, radians.
    pub angle: f64,
    pub half_width: f64,
    /// Distance from the apex where the shadow starts.
    pub start_radius: f64,
    /// Multiplier applied inside the cone.
    pub attenuation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsStyle {
    /// Standard deviation of the multiplicative speckle.
    pub speckle_sigma: f64,
    /// Weight of the bright echo added along boundaries facing the apex.
    pub boundary_gain: f64,
    pub shadow: Option<Shadow>,
}

impl Default for UsStyle {
    fn default() -> Self {
        Self {
            speckle_sigma: 0.1,
            boundary_gain: 0.5,
            shadow: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: (usize, usize),
    pub seed: u64,
    pub background: f64,
    pub liver_intensity: f64,
    /// Closed polygon, vertices in pixel coordinates.
    pub liver: Vec<(f64, f64)>,
    pub vessels: Vec<Vessel>,
    /// Amplitude of the smooth seeded texture inside the liver.
    pub texture: f64,
    /// Correlation length of the texture, pixels.
    pub texture_scale: f64,
    /// Gaussian softening of all boundaries, pixels.
    pub edge_softness: f64,
    pub deform: Deformation,
    pub us_style: UsStyle,
    pub geom: SectorGeometry,
    pub landmark_count: usize,
}

impl PhantomSpec {
    /// A liver-like blob with a handful of vessels, scaled to the image.
    pub fn standard(width: usize, height: usize, seed: u64) -> Self {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = (0.5 * w, 0.55 * h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let liver: Vec<(f64, f64)> = (0..12)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 12.0;
                let wobble = 1.0 + 0.12 * (3.0 * t).sin() + rng.gen_range(-0.05..0.05);
                (cx + 0.36 * w * wobble * t.cos(), cy + 0.3 * h * wobble * t.sin())
            })
            .collect();
        let vessels = (0..6)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 6.0 + 0.4;
                let rr = if i % 2 == 0 { 0.16 } else { 0.08 };
                Vessel {
                    center: (
                        cx + rr * w * t.cos() + rng.gen_range(-0.02..0.02) * w,
                        cy + 0.8 * rr * h * t.sin() + rng.gen_range(-0.02..0.02) * h,
                    ),
                    radius: (0.025 + 0.02 * rng.gen::<f64>()) * w.min(h),
                    intensity: 0.15 + 0.1 * rng.gen::<f64>(),
                }
            })
            .collect();
        Self {
            size: (width, height),
            seed,
            background: 0.1,
            liver_intensity: 0.6,
            liver,
            vessels,
            texture: 0.1,
            texture_scale: 1.5,
            edge_softness: 1.0,
            deform: Deformation::None,
            us_style: UsStyle::default(),
            geom: SectorGeometry::default_for(width, height),
            landmark_count: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.size;
        if w < 8 || h < 8 {
            return Err(Error::param("size", "phantom must be at least 8x8"));
        }
        if self.liver.len() < 3 || polygon_area(&self.liver).abs() < 1.0 {
            return Err(Error::Degenerate("liver polygon is empty".into()));
        }
        if let Deformation::Sinusoidal { amplitude, wavelength } = self.deform {
            if !(wavelength > 0.0) || amplitude.abs() > wavelength / 4.0 {
                return Err(Error::param(
                    "deform",
                    format!("sinusoidal amplitude {amplitude} exceeds wavelength/4 ({wavelength})"),
                ));
            }
        }
        if let Deformation::GaussianBump { sigma, .. } = self.deform {
            if !(sigma > 0.0) {
                return Err(Error::param("deform", "bump sigma must be positive"));
            }
        }
        self.geom.validate()
    }
}

/// A rendered CT-like phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct CtPhantom {
    pub image: Image2D,
    pub mask: Mask2D,
    /// Landmark positions in CT (fixed) coordinates.
    pub landmarks: Vec<(f64, f64)>,
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

fn polygon_centroid(poly: &[(f64, f64)]) -> (f64, f64) {
    let n = poly.len() as f64;
    let (sx, sy) = poly.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    (sx / n, sy / n)
}

/// Even-odd point-in-polygon test.
fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn smooth_texture(w: usize, h: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    let mut t = blur_plane(&noise, w, h, scale);
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let sd = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
    if sd > 0.0 {
        t.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    t
}

/// Renders one slice; `shift` moves the vessels and `shrink` scales their
/// radii, which is how the volume variant varies slowly along `z`.
fn render(spec: &PhantomSpec, texture: &[f64], shift: (f64, f64), shrink: f64) -> Image2D {
    let (w, h) = spec.size;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let mut v = spec.background;
            if inside_polygon(&spec.liver, px, py) {
                v = spec.liver_intensity + spec.texture * texture[y * w + x];
                for vessel in &spec.vessels {
                    let (cx, cy) = (vessel.center.0 + shift.0, vessel.center.1 + shift.1);
                    if (px - cx).hypot(py - cy) <= vessel.radius * shrink {
                        v = vessel.intensity;
                    }
                }
            }
            data.push(v);
        }
    }
    let data = blur_plane(&data, w, h, spec.edge_softness);
    Image2D::from_raw(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

fn landmarks(spec: &PhantomSpec, mask: &Mask2D) -> Vec<(f64, f64)> {
    let (w, h) = spec.size;
    let inside = |p: (f64, f64)| {
        let (x, y) = (p.0.round(), p.1.round());
        x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h && mask.get(x as usize, y as usize)
    };
    let c = polygon_centroid(&spec.liver);
    let mut out: Vec<(f64, f64)> = spec.vessels.iter().map(|v| v.center).filter(|&p| inside(p)).collect();
    // boundary corners pulled slightly inwards so they sit inside the mask
    let mut inset = 4.0;
    while out.len() < spec.landmark_count && inset < 0.5 * w.min(h) as f64 {
        for &(vx, vy) in &spec.liver {
            if out.len() >= spec.landmark_count {
                break;
            }
            let (dx, dy) = (c.0 - vx, c.1 - vy);
            let d = dx.hypot(dy);
            let p = (vx + inset * dx / d, vy + inset * dy / d);
            if inside(p) {
                out.push(p);
            }
        }
        inset *= 2.0;
    }
    out.truncate(spec.landmark_count);
    out
}

/// Renders the CT phantom, its liver mask and landmarks.
pub fn make_ct_phantom(spec: &PhantomSpec) -> Result<CtPhantom> {
    spec.validate()?;
    let (w, h) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = smooth_texture(w, h, spec.texture_scale, &mut rng);
    let image = render(spec, &texture, (0.0, 0.0), 1.0);
    let mask = Mask2D::from_fn(w, h, |x, y| inside_polygon(&spec.liver, x as f64, y as f64));
    let landmarks = landmarks(spec, &mask);
    Ok(CtPhantom { image, mask, landmarks })
}

/// Volume variant: `depth` slices whose vessels drift and narrow slowly away
/// from the center slice `depth / 2`, which equals [`make_ct_phantom`]'s
/// image.
pub fn make_ct_volume(spec: &PhantomSpec, depth: usize) -> Result<(Volume3D, CtPhantom)> {
    if depth == 0 {
        return Err(Error::param("depth", "must be >= 1"));
    }
    let center = make_ct_phantom(spec)?;
    let (w, h) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = smooth_texture(w, h, spec.texture_scale, &mut rng);
    let mid = depth / 2;
    let slices: Vec<Image2D> = (0..depth)
        .map(|z| {
            if z == mid {
                return center.image.clone();
            }
            let dz = z as f64 - mid as f64;
            render(spec, &texture, (0.6 * dz, -0.4 * dz), 1.0 - 0.04 * dz.abs())
        })
        .collect();
    Ok((Volume3D::from_slices(&slices)?, center))
}

/// Ultrasound-like rendering of a CT phantom: monotone intensity remap,
/// bright echoes on apex-facing boundaries, zero-mean speckle, optional
/// shadow cone, black outside the sector.
pub fn make_us_phantom(ct: &Image2D, spec: &PhantomSpec) -> Result<Image2D> {
    spec.validate()?;
    let (w, h) = ct.dims();
    if (w, h) != spec.size {
        return Err(Error::DimensionMismatch {
            what: "ct phantom vs spec",
            left: (w, h, 1),
            right: (spec.size.0, spec.size.1, 1),
        });
    }
    let style = &spec.us_style;
    let remap = |v: f64| 0.05 + 0.85 * v.clamp(0.0, 1.0).powf(0.7);
    let mut us: Vec<f64> = ct.data().iter().map(|&v| remap(v)).collect();

    if style.boundary_gain != 0.0 {
        let (gx, gy) = gradient_xy(ct)?;
        let radial = radial_projection(&gx, &gy, &spec.geom)?;
        let scale = gx.data().iter().zip(gy.data()).fold(0.0f64, |m, (a, b)| m.max(a.hypot(*b)));
        if scale > 0.0 {
            for (u, r) in us.iter_mut().zip(radial.data()) {
                *u += style.boundary_gain * r.abs() / scale;
            }
        }
    }

    if style.speckle_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05ec_c1e0);
        let speckle: Vec<f64> = us
            .iter()
            .map(|&u| u * style.speckle_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = speckle.iter().sum::<f64>() / speckle.len() as f64;
        for (u, s) in us.iter_mut().zip(&speckle) {
            *u += s - mean;
        }
    }

    let geom = &spec.geom;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let i = y * w + x;
            if !geom.contains(px, py) {
                us[i] = 0.0;
                continue;
            }
            if let Some(s) = style.shadow {
                if (geom.deflection_angle(px, py) - s.angle).abs() <= s.half_width && geom.radius(px, py) >= s.start_radius {
                    us[i] *= s.attenuation;
                }
            }
            us[i] = us[i].clamp(0.0, 1.0);
        }
    }
    Ok(Image2D::from_raw(w, h, us))
}

/// The ground-truth displacement field of `deform` on a `w x h` grid.
pub fn ground_truth_field(deform: &Deformation, w: usize, h: usize) -> DeformationField2D {
    match *deform {
        Deformation::None => DeformationField2D::zeros(w, h),
        Deformation::Sinusoidal { amplitude, wavelength } => {
            let k = 2.0 * PI / wavelength;
            DeformationField2D::from_fn(w, h, |x, y| {
                let (kx, ky) = (k * x as f64, k * y as f64);
                (amplitude * ky.sin() * kx.cos(), amplitude * ky.cos() * kx.sin())
            })
        }
        Deformation::GaussianBump { center, amplitude, sigma } => DeformationField2D::from_fn(w, h, |x, y| {
            let d2 = (x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2);
            let g = (-d2 / (2.0 * sigma * sigma)).exp();
            (amplitude.0 * g, amplitude.1 * g)
        }),
    }
}

/// Smallest Jacobian determinant of `p -> p + u(p)` over the grid, using
/// the same finite differences as the rest of the crate.
pub fn min_jacobian(field: &DeformationField2D) -> Result<f64> {
    let (ux_x, ux_y) = gradient_xy(&field.component_x())?;
    let (uy_x, uy_y) = gradient_xy(&field.component_y())?;
    Ok((0..ux_x.len())
        .map(|i| {
            let (a, b) = (1.0 + ux_x.data()[i], ux_y.data()[i]);
            let (c, d) = (uy_x.data()[i], 1.0 + uy_y.data()[i]);
            a * d - b * c
        })
        .fold(f64::INFINITY, f64::min))
}

/// A complete synthetic registration problem.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    /// CT volume; its center slice is `ct.image`.
    pub volume: Volume3D,
    pub ct: CtPhantom,
    /// Ultrasound-style image of the deformed anatomy.
    pub us: Image2D,
    /// Deformation applied to the anatomy before the ultrasound rendering.
    pub truth: DeformationField2D,
    /// Where each CT landmark ends up in the ultrasound image.
    pub moving_landmarks: Vec<(f64, f64)>,
}

/// Builds the CT volume, then renders the ultrasound image from the center
/// slice deformed by the spec's ground-truth warp.
pub fn make_phantom_case(spec: &PhantomSpec, depth: usize) -> Result<PhantomCase> {
    let (volume, ct) = make_ct_volume(spec, depth)?;
    let (deformed, truth) = apply_ground_truth_warp(&ct.image, spec)?;
    let us = make_us_phantom(&deformed, spec)?;
    let moving_landmarks = transport_points(&ct.landmarks, &truth);
    Ok(PhantomCase {
        volume,
        ct,
        us,
        truth,
        moving_landmarks,
    })
}

/// Warps `img` with the spec's ground-truth deformation; returns the
/// warped image and the exact field used (`out(p) = img(p + u(p))`).
pub fn apply_ground_truth_warp(img: &Image2D, spec: &PhantomSpec) -> Result<(Image2D, DeformationField2D)> {
    let (w, h) = img.dims();
    let field = ground_truth_field(&spec.deform, w, h);
    let jmin = min_jacobian(&field)?;
    if !(jmin > 0.0) {
        return Err(Error::Degenerate(format!(
            "ground-truth warp folds (min Jacobian {jmin:.4})"
        )));
    }
    Ok((warp(img, &field)?, field))
}

/// Positions in the warped image of features that sat at `points` in the
/// unwarped image: solves `p + u(p) = x` by fixed-point iteration.
pub fn transport_points(points: &[(f64, f64)], field: &DeformationField2D) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|&(x, y)| {
            let mut p = (x, y);
            for _ in 0..100 {
                let (ux, uy) = field.sample(p.0, p.1);
                let next = (x - ux, y - uy);
                let moved = (next.0 - p.0).hypot(next.1 - p.1);
                p = next;
                if moved < 1e-12 {
                    break;
                }
            }
            p
        })
        .collect()
}

/// The field `T` with `p + T(p) = q` whenever `q + u(q) = p`: the
/// displacement a registration of the warped image back onto the original
/// should recover.
pub fn inverse_displacement(field: &DeformationField2D) -> DeformationField2D {
    let (w, h) = field.dims();
    let grid: Vec<(f64, f64)> = (0..h).flat_map(|y| (0..w).map(move |x| (x as f64, y as f64))).collect();
    let back = transport_points(&grid, field);
    DeformationField2D::from_fn(w, h, |x, y| {
        let p = back[y * w + x];
        (p.0 - x as f64, p.1 - y as f64)
    })
}
