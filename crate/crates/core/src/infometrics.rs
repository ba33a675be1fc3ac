//! Entropy, mutual information, normalized mutual information and the
//! local mutual-information force that drives multimodal Demons.
//!
//! Reported information quantities are in bits. The force keeps the natural
//! logarithm of its defining formula.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DeformationField2D, Image2D, Mask2D};

/// Uniform bin index of an intensity on `[0, 1]`; the last bin is closed and
/// values outside the range are clamped into the end bins.
#[inline]
pub fn bin_index(v: f64, bins: usize) -> usize {
    // the float-to-int cast truncates and saturates negatives and NaN to 0
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Normalized joint and marginal intensity distributions of an image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    /// Row-major `bins x bins`, indexed `[a_bin * bins + b_bin]`.
    pub joint: Vec<f64>,
    pub marginal_a: Vec<f64>,
    pub marginal_b: Vec<f64>,
    pub sample_count: usize,
}

impl JointHistogram {
    /// Builds the distributions from raw co-occurrence counts.
    pub fn from_counts(bins: usize, counts: &[u64]) -> Self {
        assert_eq!(counts.len(), bins * bins);
        let total: u64 = counts.iter().sum();
        let norm = if total > 0 { 1.0 / total as f64 } else { 0.0 };
        let joint: Vec<f64> = counts.iter().map(|&c| c as f64 * norm).collect();
        let mut marginal_a = vec![0.0; bins];
        let mut marginal_b = vec![0.0; bins];
        // marginals from integer counts so they are exact row/column sums
        for a in 0..bins {
            let row = &counts[a * bins..(a + 1) * bins];
            marginal_a[a] = row.iter().sum::<u64>() as f64 * norm;
            for (b, &c) in row.iter().enumerate() {
                marginal_b[b] += c as f64;
            }
        }
        marginal_b.iter_mut().for_each(|v| *v *= norm);
        Self {
            bins,
            joint,
            marginal_a,
            marginal_b,
            sample_count: total as usize,
        }
    }

    /// Joint histogram with the roles of the two images exchanged.
    pub fn transposed(&self) -> Self {
        let n = self.bins;
        let mut joint = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                joint[b * n + a] = self.joint[a * n + b];
            }
        }
        Self {
            bins: n,
            joint,
            marginal_a: self.marginal_b.clone(),
            marginal_b: self.marginal_a.clone(),
            sample_count: self.sample_count,
        }
    }

    pub fn entropy_a(&self) -> f64 {
        entropy_unchecked(&self.marginal_a)
    }

    pub fn entropy_b(&self) -> f64 {
        entropy_unchecked(&self.marginal_b)
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy_unchecked(&self.joint)
    }
}

/// Joint histogram of `a` and `b` over `bins` uniform bins on `[0, 1]`,
/// restricted to `mask` when given.
pub fn joint_histogram(a: &Image2D, b: &Image2D, bins: usize, mask: Option<&Mask2D>) -> Result<JointHistogram> {
    a.check_same_dims(b, "joint histogram images")?;
    if bins < 2 {
        return Err(Error::param("bins", format!("need at least 2, got {bins}")));
    }
    if let Some(m) = mask {
        m.check_dims(a.dims(), "joint histogram mask")?;
    }
    let mut counts = vec![0u64; bins * bins];
    let bits = mask.map(|m| m.bits());
    for (i, (&va, &vb)) in a.data().iter().zip(b.data()).enumerate() {
        if bits.is_some_and(|m| !m[i]) {
            continue;
        }
        counts[bin_index(va, bins) * bins + bin_index(vb, bins)] += 1;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyMask);
    }
    Ok(JointHistogram::from_counts(bins, &counts))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidData(format!("negative or non-finite probability {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidData(format!("probabilities sum to {total}, not 1")));
    }
    Ok(entropy_unchecked(p))
}

/// `sum p_ab log2(p_ab / (p_a p_b))` over occupied cells.
pub fn mutual_information(h: &JointHistogram) -> f64 {
    let n = h.bins;
    let mut mi = 0.0;
    for a in 0..n {
        let pa = h.marginal_a[a];
        if pa == 0.0 {
            continue;
        }
        for b in 0..n {
            let pab = h.joint[a * n + b];
            if pab > 0.0 {
                mi += pab * (pab / (pa * h.marginal_b[b])).log2();
            }
        }
    }
    mi
}

/// Normalized mutual information `(H(A) + H(B)) / H(A, B)`.
pub fn nmi(h: &JointHistogram) -> Result<f64> {
    let hab = h.joint_entropy();
    if hab <= 0.0 {
        return Err(Error::Degenerate("joint entropy is zero (both images constant)".into()));
    }
    Ok((h.entropy_a() + h.entropy_b()) / hab)
}

/// NMI computed straight from co-occurrence counts. Used by the search loops
/// that rebuild histograms many times.
pub(crate) fn nmi_from_counts(bins: usize, counts: &[u64]) -> Option<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let ln_n = n.ln();
    // H = ln N - (1/N) sum c ln c, in nats; the ratio is base independent
    let plogp = |c: u64| if c > 0 { c as f64 * (c as f64).ln() } else { 0.0 };
    let mut ha = 0.0;
    let mut hb_counts = vec![0u64; bins];
    let mut hab = 0.0;
    for a in 0..bins {
        let row = &counts[a * bins..(a + 1) * bins];
        let mut ra = 0;
        for (b, &c) in row.iter().enumerate() {
            ra += c;
            hb_counts[b] += c;
            hab += plogp(c);
        }
        ha += plogp(ra);
    }
    let hb: f64 = hb_counts.iter().map(|&c| plogp(c)).sum();
    let ha = ln_n - ha / n;
    let hb = ln_n - hb / n;
    let hab = ln_n - hab / n;
    if hab <= 1e-15 {
        return None;
    }
    Some((ha + hb) / hab)
}

/// Parameters of the local mutual-information force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MIForceParams {
    /// Side of the square window, odd.
    pub window_n: usize,
    pub bins: usize,
    /// Floor applied to every probability before division.
    pub epsilon: f64,
}

impl Default for MIForceParams {
    fn default() -> Self {
        Self {
            window_n: 9,
            bins: 32,
            epsilon: 1e-9,
        }
    }
}

impl MIForceParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_n < 3 || self.window_n % 2 == 0 {
            return Err(Error::param("window_n", format!("must be odd and >= 3, got {}", self.window_n)));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(Error::param("bins", format!("must be in 2..=256, got {}", self.bins)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// For every pixel whose `n x n` window fits and whose column lies in the
/// row's requested span, the number of window pixels carrying the same code
/// as the window center. Zero elsewhere.
///
/// Counted as `n * n` shifted equality tests per row, which vectorize.
fn center_code_counts(codes: &[u16], w: usize, h: usize, n: usize, spans: &[Option<(usize, usize)>]) -> Vec<u16> {
    let r = n / 2;
    let mut out = vec![0u16; w * h];
    if w < n || h < n {
        return out;
    }
    out.par_chunks_mut(w).enumerate().skip(r).take(h - 2 * r).for_each(|(y, row)| {
        let Some((lo, hi)) = spans[y] else { return };
        let (lo, hi) = (lo.max(r), hi.min(w - r - 1));
        if lo > hi {
            return;
        }
        let len = hi - lo + 1;
        let center = &codes[y * w + lo..][..len];
        let row = &mut row[lo..=hi];
        for yy in y - r..=y + r {
            for xx in lo - r..=lo + r {
                let other = &codes[yy * w + xx..][..len];
                for ((o, &c), &q) in row.iter_mut().zip(center).zip(other) {
                    // at most n * n, far from u16::MAX; wrapping keeps the loop vectorized
                    *o = o.wrapping_add((c == q) as u16);
                }
            }
        }
    });
    out
}

/// Per-row column span `[lo, hi]` of the pixels that need a force value.
fn force_spans(w: usize, h: usize, mask: Option<&Mask2D>) -> Vec<Option<(usize, usize)>> {
    match mask {
        None => vec![Some((0, w - 1)); h],
        Some(m) => m
            .bits()
            .chunks(w)
            .map(|row| {
                let lo = row.iter().position(|&b| b)?;
                let hi = row.iter().rposition(|&b| b)?;
                Some((lo, hi))
            })
            .collect(),
    }
}

/// Spans grown by one pixel in every direction, for the neighbour lookups.
fn dilate_spans(spans: &[Option<(usize, usize)>], w: usize) -> Vec<Option<(usize, usize)>> {
    let h = spans.len();
    (0..h)
        .map(|y| {
            let near = y.saturating_sub(1)..=(y + 1).min(h - 1);
            near.filter_map(|yy| spans[yy])
                .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
                .map(|(lo, hi)| (lo.saturating_sub(1), (hi + 1).min(w - 1)))
        })
        .collect()
}

fn bin_plane(img: &Image2D, bins: usize) -> Vec<u16> {
    img.data().iter().map(|&v| bin_index(v, bins) as u16).collect()
}

/// Pair codes `a_bin(q) * bins + b_bin(q + shift)`; positions whose partner
/// falls outside the image get code 0 and are never read by valid windows.
fn pair_codes(abins: &[u16], bbins: &[u16], bins: usize, w: usize, h: usize, sx: isize, sy: isize) -> Vec<u16> {
    let mut out = vec![0u16; w * h];
    for y in 0..h {
        let by = y as isize + sy;
        if by < 0 || by >= h as isize {
            continue;
        }
        for x in 0..w {
            let bx = x as isize + sx;
            if bx < 0 || bx >= w as isize {
                continue;
            }
            let i = y * w + x;
            out[i] = abins[i] * bins as u16 + bbins[by as usize * w + bx as usize];
        }
    }
    out
}

/// Local mutual-information force of the source `b` towards the target `a`.
///
/// For pixel `p` with window `m` in `a` and the co-located window `s` in `b`,
/// `r`/`t` are `s` shifted one pixel to the left/right:
///
/// `F_x = ln[(p_mr / P_r) / (p_mt / P_t)] / (n*n)`
///
/// where `p_mr` is the joint probability of the pixel pairs `(m, r)` at the
/// bin pair of the two window centers, and `P_r` the probability of the
/// center bin of `r` within `r`. `F_y` uses up/down shifts. Pixels whose
/// shifted windows leave the image get zero force; pixels outside `mask`
/// get zero force.
pub fn mi_force_field(
    a: &Image2D,
    b: &Image2D,
    params: &MIForceParams,
    mask: Option<&Mask2D>,
) -> Result<DeformationField2D> {
    a.check_same_dims(b, "mi force images")?;
    params.validate()?;
    let (w, h) = a.dims();
    let n = params.window_n;
    if n > w || n > h {
        return Err(Error::param(
            "window_n",
            format!("window {n} larger than image {w}x{h}"),
        ));
    }
    if let Some(m) = mask {
        m.check_dims(a.dims(), "mi force mask")?;
    }
    let bins = params.bins;
    let abins = bin_plane(a, bins);
    let bbins = bin_plane(b, bins);
    let spans = force_spans(w, h, mask);
    let marginal = center_code_counts(&bbins, w, h, n, &dilate_spans(&spans, w));
    let joint = |sx: isize, sy: isize| {
        center_code_counts(&pair_codes(&abins, &bbins, bins, w, h, sx, sy), w, h, n, &spans)
    };
    let (jl, jr) = (joint(-1, 0), joint(1, 0));
    let (ju, jd) = (joint(0, -1), joint(0, 1));

    let area = (n * n) as f64;
    // counts never exceed the window area, so every log is a table lookup
    let ln_prob: Vec<f64> = (0..=n * n).map(|c| (c as f64 / area).max(params.epsilon).ln()).collect();
    let lp = |c: u16| ln_prob[c as usize];
    let force = |p_near: u16, p_far: u16, m_near: u16, m_far: u16| (lp(p_near) - lp(m_near) - lp(p_far) + lp(m_far)) / area;

    let r = n / 2;
    let mut vx = vec![0.0; w * h];
    let mut vy = vec![0.0; w * h];
    if w >= n + 2 && h >= n + 2 {
        let bits = mask.map(|m| m.bits());
        vx.par_chunks_mut(w)
            .zip(vy.par_chunks_mut(w))
            .enumerate()
            .skip(r + 1)
            .take(h - n - 1)
            .for_each(|(y, (rx, ry))| {
                for x in r + 1..w - r - 1 {
                    let i = y * w + x;
                    if bits.is_some_and(|m| !m[i]) {
                        continue;
                    }
                    rx[x] = force(jl[i], jr[i], marginal[i - 1], marginal[i + 1]);
                    ry[x] = force(ju[i], jd[i], marginal[i - w], marginal[i + w]);
                }
            });
    }
    DeformationField2D::new(w, h, vx, vy)
}
