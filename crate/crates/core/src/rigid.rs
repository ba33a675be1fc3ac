//! Affine slice extraction by steepest ascent on NMI, and exhaustive 2D
//! translation alignment.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{bilinear_cell, bilinear_mix, Image2D, Mask2D, Volume3D};
use crate::infometrics::{bin_index, nmi_from_counts};

/// `p -> q p + t` in voxel coordinates `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform3D {
    pub q: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Default for AffineTransform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform3D {
    pub fn identity() -> Self {
        Self {
            q: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    pub fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        Self {
            t: [tx, ty, tz],
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians in the `x-y` plane about `center`,
    /// followed by the translation `shift`.
    pub fn in_plane(angle: f64, center: (f64, f64), shift: (f64, f64)) -> Self {
        let (s, c) = angle.sin_cos();
        let q = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let t = [
            center.0 - (c * center.0 - s * center.1) + shift.0,
            center.1 - (s * center.0 + c * center.1) + shift.1,
            0.0,
        ];
        Self { q, t }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = &self.q;
        [
            q[0][0] * p[0] + q[0][1] * p[1] + q[0][2] * p[2] + self.t[0],
            q[1][0] * p[0] + q[1][1] * p[1] + q[1][2] * p[2] + self.t[1],
            q[2][0] * p[0] + q[2][1] * p[1] + q[2][2] * p[2] + self.t[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let q = &self.q;
        q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1]) - q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0])
            + q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(Error::Degenerate("affine matrix is singular".into()));
        }
        let q = &self.q;
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in inv.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                // adjugate: cofactor of (c, r)
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                *v = (q[r1][c1] * q[r2][c2] - q[r1][c2] * q[r2][c1]) / det;
            }
        }
        let mut t = [0.0; 3];
        for (r, tv) in t.iter_mut().enumerate() {
            *tv = -(0..3).map(|c| inv[r][c] * self.t[c]).sum::<f64>();
        }
        Ok(Self { q: inv, t })
    }

    /// Row-major `q` followed by `t`.
    pub fn to_array(&self) -> [f64; 12] {
        let mut a = [0.0; 12];
        for r in 0..3 {
            a[3 * r..3 * r + 3].copy_from_slice(&self.q[r]);
        }
        a[9..].copy_from_slice(&self.t);
        a
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        let mut q = [[0.0; 3]; 3];
        for r in 0..3 {
            q[r].copy_from_slice(&a[3 * r..3 * r + 3]);
        }
        Self {
            q,
            t: [a[9], a[10], a[11]],
        }
    }

    /// In-plane rotation angle of the upper-left 2x2 block, radians.
    /// The same mapping written for a volume whose slice indices are
    /// offset by `z0`: `T'(p) = T(p - z0 e_z) + z0 e_z`.
    pub fn offset_z(&self, z0: f64) -> Self {
        let mut t = self.t;
        for (i, ti) in t.iter_mut().enumerate() {
            let e = if i == 2 { 1.0 } else { 0.0 };
            *ti += z0 * (e - self.q[i][2]);
        }
        Self { q: self.q, t }
    }

    pub fn in_plane_angle(&self) -> f64 {
        (self.q[1][0] - self.q[0][1]).atan2(self.q[0][0] + self.q[1][1])
    }
}

impl std::fmt::Display for AffineTransform3D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.to_array().iter().map(|v| format!("{v:.17e}")).collect();
        f.write_str(&parts.join(" "))
    }
}

impl std::str::FromStr for AffineTransform3D {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::InvalidData(format!("transform value `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        let arr: [f64; 12] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::InvalidData(format!("transform needs 12 values, got {}", v.len())))?;
        Ok(Self::from_array(&arr))
    }
}

pub fn apply_affine(t: &AffineTransform3D, p: [f64; 3]) -> [f64; 3] {
    t.apply(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidSearchParams {
    pub max_iter: usize,
    /// Initial step length in preconditioned units (pixels for translations,
    /// hundredths for matrix entries).
    pub step0: f64,
    pub step_shrink: f64,
    pub min_step: f64,
    pub bins: usize,
    /// Central-difference probe, preconditioned units.
    pub fd_delta: f64,
    /// Upper bound on the number of pixels used per NMI evaluation; larger
    /// slices are evaluated on a regular subgrid.
    pub max_samples: usize,
}

impl Default for RigidSearchParams {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step0: 0.1,
            step_shrink: 0.5,
            min_step: 1e-5,
            bins: 64,
            fd_delta: 0.5,
            max_samples: 65536,
        }
    }
}

impl RigidSearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::param("step_shrink", format!("must lie in (0, 1), got {}", self.step_shrink)));
        }
        if !(self.step0 > 0.0) || !(self.min_step > 0.0) || !(self.fd_delta > 0.0) {
            return Err(Error::param("step0", "step0, min_step and fd_delta must be > 0"));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(Error::param("bins", format!("must lie in 2..=256, got {}", self.bins)));
        }
        if self.max_samples == 0 {
            return Err(Error::param("max_samples", "must be >= 1"));
        }
        Ok(())
    }
}

#[inline]
fn trilinear(vol: &Volume3D, p: [f64; 3]) -> f64 {
    let (w, h, d) = vol.dims();
    let (x0, y0, fx, fy) = bilinear_cell(w, h, p[0], p[1]);
    let z = p[2].clamp(0.0, (d - 1) as f64);
    let z0 = (z as usize).min(d.saturating_sub(2));
    let fz = z - z0 as f64;
    let a = bilinear_mix(vol.slice_data(z0), w, h, x0, y0, fx, fy);
    if fz == 0.0 || d == 1 {
        return a;
    }
    let b = bilinear_mix(vol.slice_data(z0 + 1), w, h, x0, y0, fx, fy);
    a + fz * (b - a)
}

/// Samples `vol` at `T (x, y, k)` for every pixel, trilinear with clamping.
pub fn resample_volume_slice(vol: &Volume3D, t: &AffineTransform3D, k: usize) -> Result<Image2D> {
    let (w, h, d) = vol.dims();
    if k >= d {
        return Err(Error::OutOfRange { index: k, len: d });
    }
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = trilinear(vol, t.apply([x as f64, y as f64, k as f64]));
        }
    });
    Ok(Image2D::from_raw(w, h, out))
}

/// Result of [`register_affine`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRegistration {
    pub transform: AffineTransform3D,
    pub nmi_initial: f64,
    pub nmi_final: f64,
    /// NMI after every accepted step, starting with the identity.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

const MATRIX_SCALE: f64 = 100.0;

/// NMI objective on a fixed pixel subgrid, parametrized about the slice
/// center so that matrix and translation steps decouple.
struct Objective<'a> {
    vol: &'a Volume3D,
    k: usize,
    center: [f64; 3],
    samples: Vec<(usize, usize)>,
    us_bins: Vec<usize>,
    bins: usize,
}

impl Objective<'_> {
    fn transform(&self, theta: &[f64; 12]) -> AffineTransform3D {
        let mut q = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                q[r][c] = if r == c { 1.0 } else { 0.0 } + theta[3 * r + c] / MATRIX_SCALE;
            }
        }
        let c = self.center;
        let mut t = [0.0; 3];
        for r in 0..3 {
            t[r] = c[r] + theta[9 + r] - (0..3).map(|j| q[r][j] * c[j]).sum::<f64>();
        }
        AffineTransform3D { q, t }
    }

    fn eval(&self, theta: &[f64; 12]) -> Option<f64> {
        let t = self.transform(theta);
        let bins = self.bins;
        let mut counts = vec![0u64; bins * bins];
        for (&(x, y), &ub) in self.samples.iter().zip(&self.us_bins) {
            let v = trilinear(self.vol, t.apply([x as f64, y as f64, self.k as f64]));
            counts[ub * bins + bin_index(v, bins)] += 1;
        }
        nmi_from_counts(bins, &counts)
    }
}

/// Maximizes `NMI(us, resample_volume_slice(vol, T, center_slice))` over
/// the twelve affine parameters by steepest ascent from the identity.
pub fn register_affine(
    vol: &Volume3D,
    us: &Image2D,
    center_slice: usize,
    params: &RigidSearchParams,
) -> Result<AffineRegistration> {
    params.validate()?;
    let (w, h, d) = vol.dims();
    if d < 3 {
        return Err(Error::param("volume", format!("depth must be >= 3, got {d}")));
    }
    if center_slice >= d {
        return Err(Error::OutOfRange {
            index: center_slice,
            len: d,
        });
    }
    if us.dims() != (w, h) {
        return Err(Error::DimensionMismatch {
            what: "ultrasound vs volume slice",
            left: (us.width(), us.height(), 1),
            right: (w, h, 1),
        });
    }
    let stride = ((w * h) as f64 / params.max_samples as f64).sqrt().ceil().max(1.0) as usize;
    let samples: Vec<(usize, usize)> = (0..h)
        .step_by(stride)
        .flat_map(|y| (0..w).step_by(stride).map(move |x| (x, y)))
        .collect();
    let us_bins = samples.iter().map(|&(x, y)| bin_index(us.get(x, y), params.bins)).collect();
    let obj = Objective {
        vol,
        k: center_slice,
        center: [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, center_slice as f64],
        samples,
        us_bins,
        bins: params.bins,
    };
    let degenerate = || Error::Degenerate("NMI undefined: joint entropy is zero".into());

    let mut theta = [0.0; 12];
    let mut f = obj.eval(&theta).ok_or_else(degenerate)?;
    let nmi_initial = f;
    let mut trace = vec![f];
    let mut step = params.step0;
    let max_step = params.step0 * 64.0;
    let mut iterations = 0;
    while iterations < params.max_iter && step >= params.min_step {
        iterations += 1;
        let grad: Vec<f64> = (0..12)
            .into_par_iter()
            .map(|i| {
                let mut plus = theta;
                let mut minus = theta;
                plus[i] += params.fd_delta;
                minus[i] -= params.fd_delta;
                match (obj.eval(&plus), obj.eval(&minus)) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * params.fd_delta),
                    _ => 0.0,
                }
            })
            .collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        // backtrack along the normalized gradient until NMI improves
        let mut accepted = None;
        while step >= params.min_step {
            let mut cand = theta;
            for (c, g) in cand.iter_mut().zip(&grad) {
                *c += step * g / norm;
            }
            if obj.transform(&cand).det() > 0.0 {
                if let Some(fc) = obj.eval(&cand) {
                    if fc > f {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
            }
            step *= params.step_shrink;
        }
        let Some((cand, fc)) = accepted else { break };
        let rel = (fc - f) / f;
        theta = cand;
        f = fc;
        trace.push(f);
        log::debug!("affine iter {iterations}: nmi {f:.6} step {step:.4}");
        if rel < 1e-6 {
            break;
        }
        step = (step / params.step_shrink).min(max_step);
    }
    Ok(AffineRegistration {
        transform: obj.transform(&theta),
        nmi_initial,
        nmi_final: f,
        trace,
        iterations,
    })
}

/// Integer shift `(dx, dy)` maximizing NMI between `fixed(p)` and
/// `moving(p + (dx, dy))` over the mask; sampling clamps at the border.
/// Ties go to the smallest shift, then to the lexicographically smallest.
pub fn align_translation_2d(fixed: &Image2D, moving: &Image2D, mask: &Mask2D, max_shift: usize) -> Result<(i32, i32)> {
    align_translation_2d_bins(fixed, moving, mask, max_shift, 64)
}

pub fn align_translation_2d_bins(
    fixed: &Image2D,
    moving: &Image2D,
    mask: &Mask2D,
    max_shift: usize,
    bins: usize,
) -> Result<(i32, i32)> {
    fixed.check_same_dims(moving, "translation alignment images")?;
    mask.check_dims(fixed.dims(), "translation alignment mask")?;
    if !(2..=256).contains(&bins) {
        return Err(Error::param("bins", format!("must lie in 2..=256, got {bins}")));
    }
    let (w, h) = fixed.dims();
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let fixed_bins: Vec<usize> = pixels.iter().map(|&(x, y)| bin_index(fixed.get(x, y), bins)).collect();
    let moving_bins: Vec<usize> = moving.data().iter().map(|&v| bin_index(v, bins)).collect();
    let m = max_shift as i32;
    let shifts: Vec<(i32, i32)> = (-m..=m).flat_map(|dx| (-m..=m).map(move |dy| (dx, dy))).collect();
    let scores: Vec<Option<f64>> = shifts
        .par_iter()
        .map(|&(dx, dy)| {
            let mut counts = vec![0u64; bins * bins];
            for (&(x, y), &fb) in pixels.iter().zip(&fixed_bins) {
                let mx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                let my = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                counts[fb * bins + moving_bins[my * w + mx]] += 1;
            }
            nmi_from_counts(bins, &counts)
        })
        .collect();
    let mut best: Option<((i32, i32), f64)> = None;
    for (&s, score) in shifts.iter().zip(scores) {
        let Some(v) = score else { continue };
        let better = match best {
            None => true,
            Some((b, bv)) => {
                let key = |p: (i32, i32)| (p.0 * p.0 + p.1 * p.1, p.0, p.1);
                v > bv || (v == bv && key(s) < key(b))
            }
        };
        if better {
            best = Some((s, v));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| Error::Degenerate("NMI undefined for every shift: images are constant over the mask".into()))
}
