use crate::error::{Error, Result};
use crate::grid::Image2D;

/// Dense per-pixel displacement field in pixel units.
///
/// Components are stored as two planes so that per-component filtering can
/// reuse the scalar image kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField2D {
    width: usize,
    height: usize,
    vx: Vec<f64>,
    vy: Vec<f64>,
}

impl DeformationField2D {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vx: vec![0.0; width * height],
            vy: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, vx: Vec<f64>, vy: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if vx.len() != n || vy.len() != n {
            return Err(Error::InvalidData(format!(
                "field planes ({}, {}) do not match {width}x{height}",
                vx.len(),
                vy.len()
            )));
        }
        if vx.iter().chain(&vy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite displacement".into()));
        }
        Ok(Self { width, height, vx, vy })
    }

    pub fn uniform(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        Self {
            width,
            height,
            vx: vec![dx; width * height],
            vy: vec![dy; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut vx = Vec::with_capacity(width * height);
        let mut vy = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                vx.push(a);
                vy.push(b);
            }
        }
        Self { width, height, vx, vy }
    }

    pub fn from_components(vx: Image2D, vy: Image2D) -> Result<Self> {
        vx.check_same_dims(&vy, "field components")?;
        let (w, h) = vx.dims();
        Self::new(w, h, vx.into_data(), vy.into_data())
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

    pub fn vx(&self) -> &[f64] {
        &self.vx
    }

    pub fn vy(&self) -> &[f64] {
        &self.vy
    }

    pub fn vx_mut(&mut self) -> &mut [f64] {
        &mut self.vx
    }

    pub fn vy_mut(&mut self) -> &mut [f64] {
        &mut self.vy
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.vx[i], self.vy[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: (f64, f64)) {
        let i = y * self.width + x;
        self.vx[i] = v.0;
        self.vy[i] = v.1;
    }

    pub fn component_x(&self) -> Image2D {
        Image2D::from_raw(self.width, self.height, self.vx.clone())
    }

    pub fn component_y(&self) -> Image2D {
        Image2D::from_raw(self.width, self.height, self.vy.clone())
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.vx.iter().zip(&self.vy).map(|(a, b)| (a * a + b * b).sqrt())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().fold(0.0, f64::max)
    }

    /// Bilinearly interpolated displacement at a continuous position, with
    /// border clamping.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0, fx, fy) = super::ops::bilinear_cell(self.width, self.height, x, y);
        let interp = |p: &[f64]| super::ops::bilinear_mix(p, self.width, self.height, x0, y0, fx, fy);
        (interp(&self.vx), interp(&self.vy))
    }

    /// `self + s * other`, component-wise.
    pub fn add_scaled(&mut self, other: &DeformationField2D, s: f64) -> Result<()> {
        self.check_dims(other.dims(), "field update")?;
        for (a, b) in self.vx.iter_mut().zip(&other.vx) {
            *a += s * b;
        }
        for (a, b) in self.vy.iter_mut().zip(&other.vy) {
            *a += s * b;
        }
        Ok(())
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
