use crate::error::{Error, Result};

/// A 2D scalar image stored row-major.
///
/// Coordinates follow one convention throughout the crate: `x` is the column
/// index (along `width`) and `y` the row index (along `height`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
    /// Physical size of a pixel `(dx, dy)`. Carried as metadata only.
    pub spacing: (f64, f64),
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidData(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidData(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite intensity at index {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            spacing: (1.0, 1.0),
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Self {
            width,
            height,
            data: vec![value; width * height],
            spacing: (1.0, 1.0),
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            spacing: (1.0, 1.0),
        }
    }

    /// Internal constructor for buffers produced by the crate's own kernels.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
            spacing: (1.0, 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = Self::from_raw(self.width, self.height, self.data.iter().map(|&v| f(v)).collect());
        out.spacing = self.spacing;
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub(crate) fn check_same_dims(&self, other: &Image2D, what: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                what,
                left: (self.width, self.height, 1),
                right: (other.width, other.height, 1),
            });
        }
        Ok(())
    }
}

/// A 3D scalar volume stored slice-major (`z`, then `y`, then `x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    width: usize,
    height: usize,
    depth: usize,
    data: Vec<f64>,
    pub spacing: (f64, f64, f64),
}

impl Volume3D {
    pub fn new(width: usize, height: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::InvalidData(format!(
                "volume must be non-empty, got {width}x{height}x{depth}"
            )));
        }
        if data.len() != width * height * depth {
            return Err(Error::InvalidData(format!(
                "data length {} does not match {width}x{height}x{depth}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite intensity at index {i}")));
        }
        Ok(Self {
            width,
            height,
            depth,
            data,
            spacing: (1.0, 1.0, 1.0),
        })
    }

    pub(crate) fn from_raw(width: usize, height: usize, depth: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * depth);
        Self {
            width,
            height,
            depth,
            data,
            spacing: (1.0, 1.0, 1.0),
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(width > 0 && height > 0 && depth > 0, "volume must be non-empty");
        let mut data = Vec::with_capacity(width * height * depth);
        for z in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_raw(width, height, depth, data)
    }

    /// Stacks equally sized slices into a volume.
    pub fn from_slices(slices: &[Image2D]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidData("no slices given".into()))?;
        let mut data = Vec::with_capacity(first.len() * slices.len());
        for s in slices {
            first.check_same_dims(s, "volume slices")?;
            data.extend_from_slice(s.data());
        }
        Ok(Self::from_raw(first.width(), first.height(), slices.len(), data))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[(z * self.height + y) * self.width + x]
    }

    pub fn slice_data(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[k * n..(k + 1) * n]
    }

    /// Copy of the contiguous slab `z0..z0 + count`.
    pub fn sub_volume(&self, z0: usize, count: usize) -> Result<Self> {
        if count == 0 || z0 + count > self.depth {
            return Err(Error::OutOfRange {
                index: z0 + count,
                len: self.depth,
            });
        }
        let n = self.width * self.height;
        let mut v = Self::from_raw(
            self.width,
            self.height,
            count,
            self.data[z0 * n..(z0 + count) * n].to_vec(),
        );
        v.spacing = self.spacing;
        Ok(v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut v = Self::from_raw(
            self.width,
            self.height,
            self.depth,
            self.data.iter().map(|&x| f(x)).collect(),
        );
        v.spacing = self.spacing;
        v
    }
}

/// Binary region-of-interest mask, `true` inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidData(format!(
                "mask length {} does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Mask of all pixels with a strictly positive value.
    pub fn from_image(img: &Image2D) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn to_image(&self) -> Image2D {
        Image2D::from_raw(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Zeroes every pixel of `img` outside the mask.
    pub fn apply(&self, img: &Image2D) -> Result<Image2D> {
        self.check_dims(img.dims(), "mask vs image")?;
        let mut out = img.clone();
        for (v, &b) in out.data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_dims(&self, dims: (usize, usize), what: &'static str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                what,
                left: (self.width, self.height, 1),
                right: (dims.0, dims.1, 1),
            });
        }
        Ok(())
    }
}
