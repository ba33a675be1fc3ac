//! Demons non-rigid registration.
//!
//! The loop follows the classic regularized fixed-point scheme: warp the
//! moving image by the current field, compute a velocity (local
//! mutual-information force or the intensity-conservation velocity),
//! smooth it with a Gaussian, scale it so that no pixel moves by a pixel or
//! more, and add it to the field.

use crate::error::{Error, Result};
use crate::grid::{bilinear_cell, bilinear_mix, gaussian_blur_field, gradient_xy, DeformationField2D, Image2D, Mask2D};
use crate::infometrics::{mi_force_field, MIForceParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceKind {
    /// Local mutual-information force, for multimodal pairs.
    MutualInformation,
    /// Intensity-conservation velocity, for mono-modal pairs.
    Intensity,
}

impl std::str::FromStr for ForceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" => Ok(ForceKind::MutualInformation),
            "intensity" => Ok(ForceKind::Intensity),
            other => Err(Error::param("force", format!("expected `mi` or `intensity`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for ForceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForceKind::MutualInformation => "mi",
            ForceKind::Intensity => "intensity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemonsParams {
    /// Gaussian regularization of each velocity field, pixels.
    pub sigma: f64,
    pub max_iter: usize,
    /// Stabilization weight of the intensity velocity.
    pub h: f64,
    pub force: ForceKind,
    pub mi_params: MIForceParams,
    /// Stop once the mean in-mask increment drops below this, pixels.
    pub converge_tol: f64,
    /// Largest displacement increment allowed per iteration, pixels.
    pub alpha_cap: f64,
}

impl Default for DemonsParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            max_iter: 200,
            h: 1.0,
            force: ForceKind::MutualInformation,
            mi_params: MIForceParams::default(),
            converge_tol: 1e-3,
            alpha_cap: 0.99,
        }
    }
}

impl DemonsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be > 0, got {}", self.sigma)));
        }
        if self.max_iter < 1 {
            return Err(Error::param("max_iter", "must be >= 1"));
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return Err(Error::param("h", "must be >= 0"));
        }
        if !(self.alpha_cap > 0.0 && self.alpha_cap < 1.0) {
            return Err(Error::param("alpha_cap", format!("must lie in (0, 1), got {}", self.alpha_cap)));
        }
        if !(self.converge_tol >= 0.0) {
            return Err(Error::param("converge_tol", "must be >= 0"));
        }
        self.mi_params.validate()
    }
}

/// Intensity-conservation velocity
/// `v = (i_a - i_b) grad(i_b) / (|grad(i_b)|^2 + h (i_a - i_b)^2)`.
pub fn intensity_velocity(a: &Image2D, b_warped: &Image2D, params: &DemonsParams) -> Result<DeformationField2D> {
    a.check_same_dims(b_warped, "intensity velocity images")?;
    let (w, h) = a.dims();
    let (gx, gy) = gradient_xy(b_warped)?;
    let mut vx = vec![0.0; w * h];
    let mut vy = vec![0.0; w * h];
    for i in 0..w * h {
        let diff = a.data()[i] - b_warped.data()[i];
        let (dx, dy) = (gx.data()[i], gy.data()[i]);
        let den = dx * dx + dy * dy + params.h * diff * diff;
        if den >= 1e-12 {
            vx[i] = diff * dx / den;
            vy[i] = diff * dy / den;
        }
    }
    DeformationField2D::new(w, h, vx, vy)
}

/// Step factor `min(1, cap / max|v|)`; 1 for the zero field.
pub fn compute_alpha(v: &DeformationField2D, cap: f64) -> f64 {
    let max = v.max_magnitude();
    if max > 0.0 {
        (cap / max).min(1.0)
    } else {
        1.0
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub alpha: f64,
    /// Largest `|alpha v_k|` over the image.
    pub max_increment: f64,
    /// Mean `|alpha v_k|` inside the mask.
    pub mean_increment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonsOutcome {
    pub field: DeformationField2D,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationStats>,
}

/// Velocity of the moving image towards the fixed image at the current
/// estimate.
///
/// The local MI force is positive when the pixel pairs formed with the left
/// (upper) neighbour are the more probable ones. Since the field samples the
/// moving image at `p + T(p)`, moving towards that neighbour means
/// decreasing `T`, hence the sign flip.
fn velocity(fixed: &Image2D, warped: &Image2D, mask: Option<&Mask2D>, params: &DemonsParams) -> Result<DeformationField2D> {
    match params.force {
        ForceKind::Intensity => {
            let mut v = intensity_velocity(fixed, warped, params)?;
            if let Some(m) = mask {
                zero_outside(&mut v, m);
            }
            Ok(v)
        }
        ForceKind::MutualInformation => {
            let mut f = mi_force_field(fixed, warped, &params.mi_params, mask)?;
            f.vx_mut().iter_mut().for_each(|v| *v = -*v);
            f.vy_mut().iter_mut().for_each(|v| *v = -*v);
            Ok(f)
        }
    }
}

fn zero_outside(v: &mut DeformationField2D, mask: &Mask2D) {
    let bits = mask.bits().to_vec();
    for (i, inside) in bits.into_iter().enumerate() {
        if !inside {
            v.vx_mut()[i] = 0.0;
            v.vy_mut()[i] = 0.0;
        }
    }
}

/// Registers `moving` onto `fixed`; the returned field satisfies
/// `warp(moving, field) ~ fixed`.
pub fn demons_register(
    fixed: &Image2D,
    moving: &Image2D,
    mask: Option<&Mask2D>,
    params: &DemonsParams,
) -> Result<DemonsOutcome> {
    demons_register_from(fixed, moving, mask, params, DeformationField2D::zeros(fixed.width(), fixed.height()))
}

/// Same as [`demons_register`], starting from `initial` instead of the zero
/// field.
pub fn demons_register_from(
    fixed: &Image2D,
    moving: &Image2D,
    mask: Option<&Mask2D>,
    params: &DemonsParams,
    initial: DeformationField2D,
) -> Result<DemonsOutcome> {
    params.validate()?;
    fixed.check_same_dims(moving, "demons images")?;
    initial.check_dims(fixed.dims(), "initial field")?;
    if let Some(m) = mask {
        m.check_dims(fixed.dims(), "demons mask")?;
        if m.count() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    if params.force == ForceKind::MutualInformation {
        let (lo, hi) = fixed.min_max();
        if lo == hi {
            return Err(Error::Degenerate("fixed image is constant".into()));
        }
    }
    let (w, h) = fixed.dims();
    let region = match mask {
        Some(m) => active_region(m, params),
        None => Region { x0: 0, y0: 0, w, h },
    };
    let fixed_c = region.crop_image(fixed);
    let mask_c = mask.map(|m| region.crop_mask(m));
    let inside: Vec<usize> = match &mask_c {
        Some(m) => m.bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
        None => (0..fixed_c.len()).collect(),
    };

    let mut field = region.crop_field(&initial);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_iter {
        let warped = region.warp_into(moving, &field);
        let v = velocity(&fixed_c, &warped, mask_c.as_ref(), params)?;
        let v = gaussian_blur_field(&v, params.sigma)?;
        let alpha = compute_alpha(&v, params.alpha_cap);
        let mags: Vec<f64> = v.magnitudes().map(|m| alpha * m).collect();
        let max_increment = mags.iter().copied().fold(0.0, f64::max);
        let mean_increment = inside.iter().map(|&i| mags[i]).sum::<f64>() / inside.len() as f64;
        field.add_scaled(&v, alpha)?;
        trace.push(IterationStats {
            alpha,
            max_increment,
            mean_increment,
        });
        log::debug!(
            "demons iter {}: alpha {alpha:.4} max {max_increment:.4} mean {mean_increment:.6}",
            trace.len()
        );
        if mean_increment < params.converge_tol {
            converged = true;
            break;
        }
    }
    let mut full = initial;
    region.paste_field(&field, &mut full);
    Ok(DemonsOutcome {
        iterations: trace.len(),
        field: full,
        converged,
        trace,
    })
}

/// Sub-rectangle of the frame that the iteration actually touches.
///
/// Velocities vanish outside the mask, so only the mask bounding box plus
/// the reach of the force window and of the smoothing kernel can change.
/// Margins are wide enough that reflections at the crop border only ever
/// see zeros, which keeps the cropped run identical to the full-frame one.
#[derive(Debug, Clone, Copy)]
struct Region {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn active_region(mask: &Mask2D, params: &DemonsParams) -> Region {
    let (w, h) = mask.dims();
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (w, h, 0, 0);
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        let (x, y) = (i % w, i / w);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let kernel_radius = (3.0 * params.sigma).ceil() as usize;
    let margin = (params.mi_params.window_n / 2 + 2).max(kernel_radius) + 1;
    let x0 = xmin.saturating_sub(margin);
    let y0 = ymin.saturating_sub(margin);
    let x1 = (xmax + margin).min(w - 1);
    let y1 = (ymax + margin).min(h - 1);
    Region {
        x0,
        y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    }
}

impl Region {
    fn index(&self, full_w: usize, x: usize, y: usize) -> usize {
        (self.y0 + y) * full_w + self.x0 + x
    }

    fn crop_image(&self, img: &Image2D) -> Image2D {
        let fw = img.width();
        let mut out = Image2D::from_fn(self.w, self.h, |x, y| img.data()[self.index(fw, x, y)]);
        out.spacing = img.spacing;
        out
    }

    fn crop_mask(&self, m: &Mask2D) -> Mask2D {
        let fw = m.width();
        Mask2D::from_fn(self.w, self.h, |x, y| m.bits()[self.index(fw, x, y)])
    }

    fn crop_field(&self, f: &DeformationField2D) -> DeformationField2D {
        let fw = f.width();
        DeformationField2D::from_fn(self.w, self.h, |x, y| {
            let i = self.index(fw, x, y);
            (f.vx()[i], f.vy()[i])
        })
    }

    fn paste_field(&self, src: &DeformationField2D, dst: &mut DeformationField2D) {
        for y in 0..self.h {
            for x in 0..self.w {
                dst.set(self.x0 + x, self.y0 + y, src.get(x, y));
            }
        }
    }

    /// `warp` restricted to the region, sampling the full moving image.
    fn warp_into(&self, moving: &Image2D, field: &DeformationField2D) -> Image2D {
        let (mw, mh) = moving.dims();
        let src = moving.data();
        let mut out = Image2D::from_fn(self.w, self.h, |x, y| {
            let (dx, dy) = field.get(x, y);
            let px = (self.x0 + x) as f64 + dx;
            let py = (self.y0 + y) as f64 + dy;
            let (cx, cy, fx, fy) = bilinear_cell(mw, mh, px, py);
            bilinear_mix(src, mw, mh, cx, cy, fx, fy)
        });
        out.spacing = moving.spacing;
        out
    }
}
