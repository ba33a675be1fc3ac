//! Gaussian and block-matching collaborative denoising.
//!
//! The block-matching filter is a single hard-threshold pass: every
//! reference block (stride 4) collects its most similar blocks within the
//! search window, the stack is transformed by an orthonormal DCT per block
//! and a Haar transform across the stack, small coefficients are zeroed, and
//! the inverse estimates are averaged back with weight `1 / retained`.
//! Images are handled as depth-1 volumes, so the 2D and 3D filters share one
//! engine.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, Image2D, Volume3D};

const REF_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseParams {
    pub block_size: usize,
    pub search_radius: usize,
    pub max_group: usize,
    /// Largest accepted mean squared block difference, after removing the
    /// expected noise contribution `2 sigma^2`.
    pub match_threshold: f64,
    pub hard_threshold: f64,
    pub noise_sigma: f64,
}

impl DenoiseParams {
    /// Defaults with `hard_threshold = 2.7 sigma`.
    pub fn for_sigma(noise_sigma: f64) -> Self {
        Self {
            block_size: 8,
            search_radius: 12,
            max_group: 16,
            match_threshold: 0.02,
            hard_threshold: 2.7 * noise_sigma,
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 4 || !self.block_size.is_power_of_two() {
            return Err(Error::param(
                "block_size",
                format!("must be a power of two >= 4, got {}", self.block_size),
            ));
        }
        if self.max_group < 1 {
            return Err(Error::param("max_group", "must be >= 1"));
        }
        for (name, v) in [
            ("match_threshold", self.match_threshold),
            ("hard_threshold", self.hard_threshold),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self::for_sigma(0.05)
    }
}

pub fn denoise_gaussian(img: &Image2D, sigma: f64) -> Result<Image2D> {
    gaussian_blur(img, sigma)
}

pub fn denoise_bm_2d(img: &Image2D, params: &DenoiseParams) -> Result<Image2D> {
    let (w, h) = img.dims();
    let out = bm_filter(img.data(), (w, h, 1), params)?;
    Ok(Image2D::from_raw(w, h, out))
}

pub fn denoise_bm_3d(vol: &Volume3D, params: &DenoiseParams) -> Result<Volume3D> {
    let (w, h, d) = vol.dims();
    let out = bm_filter(vol.data(), (w, h, d), params)?;
    Ok(Volume3D::from_raw(w, h, d, out))
}

/// Reference positions along an axis of length `n` for blocks of size `b`:
/// every `REF_STRIDE`, plus the last position so the whole axis is covered.
fn ref_positions(n: usize, b: usize) -> Vec<usize> {
    let last = n - b;
    let mut v: Vec<usize> = (0..=last).step_by(REF_STRIDE).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Orthonormal DCT-II matrix, row `k` holds basis function `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

fn transposed(m: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|i| m[(i % n) * n + i / n]).collect()
}

/// Applies the row-major `n x n` matrix `m` along one axis of a dense
/// `dims` array.
fn transform_axis(data: &mut [f64], dims: [usize; 3], axis: usize, m: &[f64], tmp: &mut Vec<f64>) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    tmp.resize(n, 0.0);
    for outer in 0..data.len() / (n * stride) {
        for inner in 0..stride {
            let base = outer * n * stride + inner;
            for (i, t) in tmp.iter_mut().enumerate() {
                *t = data[base + i * stride];
            }
            for k in 0..n {
                data[base + k * stride] = m[k * n..(k + 1) * n].iter().zip(tmp.iter()).map(|(c, v)| c * v).sum();
            }
        }
    }
}

/// In-place orthonormal Haar transform of `len` (a power of two) vectors of
/// size `stride` laid out back to back.
fn haar(data: &mut [f64], len: usize, stride: usize, inverse: bool, tmp: &mut Vec<f64>) {
    if len == 1 {
        return;
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    tmp.resize(len, 0.0);
    for c in 0..stride {
        if !inverse {
            let mut n = len;
            while n > 1 {
                let half = n / 2;
                for i in 0..half {
                    let (a, b) = (data[(2 * i) * stride + c], data[(2 * i + 1) * stride + c]);
                    tmp[i] = s * (a + b);
                    tmp[half + i] = s * (a - b);
                }
                for i in 0..n {
                    data[i * stride + c] = tmp[i];
                }
                n = half;
            }
        } else {
            let mut n = 2;
            while n <= len {
                let half = n / 2;
                for i in 0..half {
                    let (a, d) = (data[i * stride + c], data[(half + i) * stride + c]);
                    tmp[2 * i] = s * (a + d);
                    tmp[2 * i + 1] = s * (a - d);
                }
                for i in 0..n {
                    data[i * stride + c] = tmp[i];
                }
                n *= 2;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    order: usize,
    pos: (usize, usize, usize),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.order.cmp(&other.order))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Engine<'a> {
    src: &'a [f64],
    w: usize,
    h: usize,
    d: usize,
    bs: usize,
    bd: usize,
    rz: usize,
    params: &'a DenoiseParams,
    dct_xy: Vec<f64>,
    dct_z: Vec<f64>,
    idct_xy: Vec<f64>,
    idct_z: Vec<f64>,
}

/// A filtered group ready for aggregation.
struct GroupEstimate {
    weight: f64,
    positions: Vec<(usize, usize, usize)>,
    blocks: Vec<f64>,
}

impl Engine<'_> {
    fn at(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    /// Groups for every reference block on the line `(y0, z0)`.
    fn line_groups(&self, y0: usize, z0: usize, xs: &[usize]) -> Vec<GroupEstimate> {
        let (w, bs, bd) = (self.w, self.bs, self.bd);
        let keep = self.params.max_group.max(1);
        let nvox = (bs * bs * bd) as f64;
        let bias = 2.0 * self.params.noise_sigma * self.params.noise_sigma;
        let r = self.params.search_radius as isize;
        let rz = self.rz as isize;
        let mut heaps: Vec<BinaryHeap<Candidate>> = xs.iter().map(|_| BinaryHeap::with_capacity(keep + 1)).collect();
        let mut col = vec![0.0; w];
        let mut prefix = vec![0.0; w + 1];
        let mut order = 0usize;
        for dz in -rz..=rz {
            let cz = z0 as isize + dz;
            if cz < 0 || cz as usize + bd > self.d {
                continue;
            }
            for dy in -r..=r {
                let cy = y0 as isize + dy;
                if cy < 0 || cy as usize + bs > self.h {
                    continue;
                }
                for dx in -r..=r {
                    order += 1;
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx.max(0)) as usize;
                    col[x_lo..x_hi].iter_mut().for_each(|c| *c = 0.0);
                    for k in 0..bd {
                        for j in 0..bs {
                            let a = &self.src[self.at(x_lo, y0 + j, z0 + k)..][..x_hi - x_lo];
                            let bx = (x_lo as isize + dx) as usize;
                            let b = &self.src[self.at(bx, cy as usize + j, cz as usize + k)..][..x_hi - x_lo];
                            for ((c, &p), &q) in col[x_lo..x_hi].iter_mut().zip(a).zip(b) {
                                let diff = p - q;
                                *c += diff * diff;
                            }
                        }
                    }
                    prefix[x_lo] = 0.0;
                    for x in x_lo..x_hi {
                        prefix[x + 1] = prefix[x] + col[x];
                    }
                    for (i, &x0) in xs.iter().enumerate() {
                        let cx = x0 as isize + dx;
                        if cx < 0 || cx as usize + bs > w {
                            continue;
                        }
                        let dist = prefix[x0 + bs] - prefix[x0];
                        if (dist / nvox - bias).max(0.0) > self.params.match_threshold {
                            continue;
                        }
                        let cand = Candidate {
                            dist,
                            order,
                            pos: (cx as usize, cy as usize, cz as usize),
                        };
                        let heap = &mut heaps[i];
                        if heap.len() < keep - 1 {
                            heap.push(cand);
                        } else if let Some(top) = heap.peek() {
                            if cand < *top {
                                heap.pop();
                                heap.push(cand);
                            }
                        }
                    }
                }
            }
        }
        xs.iter()
            .zip(heaps)
            .map(|(&x0, heap)| {
                let mut positions = vec![(x0, y0, z0)];
                positions.extend(heap.into_sorted_vec().into_iter().map(|c| c.pos));
                let n = 1usize << positions.len().ilog2();
                positions.truncate(n);
                self.filter_group(positions)
            })
            .collect()
    }

    fn filter_group(&self, positions: Vec<(usize, usize, usize)>) -> GroupEstimate {
        let (bs, bd) = (self.bs, self.bd);
        let bsize = bs * bs * bd;
        let mut blocks = vec![0.0; positions.len() * bsize];
        for (g, &(x, y, z)) in positions.iter().enumerate() {
            let dst = &mut blocks[g * bsize..(g + 1) * bsize];
            for k in 0..bd {
                for j in 0..bs {
                    let s = self.at(x, y + j, z + k);
                    dst[(k * bs + j) * bs..][..bs].copy_from_slice(&self.src[s..s + bs]);
                }
            }
        }
        let dims = [bs, bs, bd];
        let mut tmp = Vec::new();
        for g in 0..positions.len() {
            let blk = &mut blocks[g * bsize..(g + 1) * bsize];
            transform_axis(blk, dims, 0, &self.dct_xy, &mut tmp);
            transform_axis(blk, dims, 1, &self.dct_xy, &mut tmp);
            transform_axis(blk, dims, 2, &self.dct_z, &mut tmp);
        }
        haar(&mut blocks, positions.len(), bsize, false, &mut tmp);
        let thr = self.params.hard_threshold;
        let mut retained = 0usize;
        for (i, c) in blocks.iter_mut().enumerate() {
            if i == 0 || c.abs() >= thr {
                retained += 1;
            } else {
                *c = 0.0;
            }
        }
        haar(&mut blocks, positions.len(), bsize, true, &mut tmp);
        for g in 0..positions.len() {
            let blk = &mut blocks[g * bsize..(g + 1) * bsize];
            transform_axis(blk, dims, 2, &self.idct_z, &mut tmp);
            transform_axis(blk, dims, 1, &self.idct_xy, &mut tmp);
            transform_axis(blk, dims, 0, &self.idct_xy, &mut tmp);
        }
        GroupEstimate {
            weight: 1.0 / retained.max(1) as f64,
            positions,
            blocks,
        }
    }

    fn aggregate(&self, est: &GroupEstimate, num: &mut [f64], den: &mut [f64]) {
        let (bs, bd) = (self.bs, self.bd);
        let bsize = bs * bs * bd;
        for (g, &(x, y, z)) in est.positions.iter().enumerate() {
            let blk = &est.blocks[g * bsize..(g + 1) * bsize];
            for k in 0..bd {
                for j in 0..bs {
                    let s = self.at(x, y + j, z + k);
                    let row = &blk[(k * bs + j) * bs..][..bs];
                    for i in 0..bs {
                        num[s + i] += est.weight * row[i];
                        den[s + i] += est.weight;
                    }
                }
            }
        }
    }
}

fn bm_filter(src: &[f64], (w, h, d): (usize, usize, usize), params: &DenoiseParams) -> Result<Vec<f64>> {
    params.validate()?;
    let bs = params.block_size;
    if w < bs || h < bs || d == 0 {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: bs,
        });
    }
    let bd = bs.min(d);
    let engine = Engine {
        src,
        w,
        h,
        d,
        bs,
        bd,
        rz: params.search_radius.min(d - bd).min(bd / 2),
        params,
        dct_xy: dct_matrix(bs),
        dct_z: dct_matrix(bd),
        idct_xy: transposed(&dct_matrix(bs), bs),
        idct_z: transposed(&dct_matrix(bd), bd),
    };
    let xs = ref_positions(w, bs);
    let lines: Vec<(usize, usize)> = ref_positions(d, bd)
        .into_iter()
        .flat_map(|z| ref_positions(h, bs).into_iter().map(move |y| (y, z)))
        .collect();

    let mut num = vec![0.0; src.len()];
    let mut den = vec![0.0; src.len()];
    // bounded batches keep memory flat; aggregation runs in line order so
    // the result does not depend on the thread count
    let batch = rayon::current_num_threads().max(1) * 4;
    for chunk in lines.chunks(batch) {
        let groups: Vec<Vec<GroupEstimate>> = chunk.par_iter().map(|&(y, z)| engine.line_groups(y, z, &xs)).collect();
        for line in &groups {
            for est in line {
                engine.aggregate(est, &mut num, &mut den);
            }
        }
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy(clean: &Image2D, sigma: f64, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        let data = clean.data().iter().map(|v| v + n.sample(&mut rng)).collect();
        Image2D::new(clean.width(), clean.height(), data).unwrap()
    }

    fn rmse(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn dct_is_orthonormal() {
        let m = dct_matrix(8);
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|i| m[a * 8 + i] * m[b * 8 + i]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn haar_round_trip() {
        let orig: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut v = orig.clone();
        let mut tmp = Vec::new();
        haar(&mut v, 8, 3, false, &mut tmp);
        let energy: f64 = v.iter().map(|x| x * x).sum();
        assert!((energy - orig.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
        haar(&mut v, 8, 3, true, &mut tmp);
        assert!(rmse(&v, &orig) < 1e-14);
    }

    #[test]
    fn reference_positions_cover_axis() {
        assert_eq!(ref_positions(16, 8), vec![0, 4, 8]);
        assert_eq!(ref_positions(18, 8), vec![0, 4, 8, 10]);
        assert_eq!(ref_positions(8, 8), vec![0]);
        assert_eq!(ref_positions(1, 1), vec![0]);
    }

    #[test]
    fn constant_image_unchanged() {
        let img = Image2D::filled(24, 20, 0.4);
        let out = denoise_bm_2d(&img, &DenoiseParams::for_sigma(0.1)).unwrap();
        assert!(rmse(out.data(), img.data()) < 1e-9);
    }

    #[test]
    fn zero_threshold_is_identity() {
        let img = noisy(&Image2D::filled(32, 32, 0.5), 0.1, 1);
        let p = DenoiseParams {
            hard_threshold: 0.0,
            ..DenoiseParams::for_sigma(0.1)
        };
        let out = denoise_bm_2d(&img, &p).unwrap();
        let max = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-9, "{max}");
    }

    #[test]
    fn reduces_noise_on_constant_image() {
        let clean = Image2D::filled(48, 48, 0.5);
        let img = noisy(&clean, 0.1, 2);
        let out = denoise_bm_2d(&img, &DenoiseParams::for_sigma(0.1)).unwrap();
        assert!(rmse(out.data(), clean.data()) < rmse(img.data(), clean.data()));
    }

    #[test]
    fn depth_one_volume_matches_2d() {
        let img = noisy(&Image2D::from_fn(40, 36, |x, _| if x < 20 { 0.2 } else { 0.7 }), 0.1, 3);
        let p = DenoiseParams::for_sigma(0.1);
        let a = denoise_bm_2d(&img, &p).unwrap();
        let vol = Volume3D::from_slices(std::slice::from_ref(&img)).unwrap();
        let b = denoise_bm_3d(&vol, &p).unwrap();
        let max = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 1e-9);
    }

    #[test]
    fn volume_noise_reduced() {
        let clean = Volume3D::from_fn(24, 24, 10, |_, _, _| 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 0.1).unwrap();
        let data = clean.data().iter().map(|v| v + n.sample(&mut rng)).collect();
        let vol = Volume3D::new(24, 24, 10, data).unwrap();
        let out = denoise_bm_3d(&vol, &DenoiseParams::for_sigma(0.1)).unwrap();
        assert_eq!(out.dims(), vol.dims());
        assert!(rmse(out.data(), clean.data()) < rmse(vol.data(), clean.data()));
        let flat = denoise_bm_3d(&clean, &DenoiseParams::for_sigma(0.1)).unwrap();
        assert!(rmse(flat.data(), clean.data()) < 1e-9);
    }

    #[test]
    fn too_small_rejected() {
        let img = Image2D::zeros(7, 20);
        assert!(matches!(
            denoise_bm_2d(&img, &DenoiseParams::default()),
            Err(Error::TooSmall { .. })
        ));
        let bad = DenoiseParams {
            block_size: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gaussian_reduces_variance() {
        let img = noisy(&Image2D::filled(32, 32, 0.5), 0.05, 5);
        let out = denoise_gaussian(&img, 1.0).unwrap();
        let var = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64
        };
        assert!(var(out.data()) < var(img.data()));
        assert_eq!(denoise_gaussian(&img, 0.0).unwrap(), img);
        assert!(denoise_gaussian(&img, -1.0).is_err());
    }
}
