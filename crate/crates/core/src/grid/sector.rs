use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Fan-shaped ultrasound field of view.
///
/// The apex is the common center of the two circular arcs bounding the
/// sector and is the origin of the polar coordinates used for radial
/// gradients. The sector opens towards `+y` (down the image).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorGeometry {
    /// `(x0, y0)` in continuous pixel coordinates (column, row).
    pub apex: (f64, f64),
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Half opening angle in radians, measured from the `+y` axis.
    pub half_angle: f64,
}

impl SectorGeometry {
    pub fn new(apex: (f64, f64), inner_radius: f64, outer_radius: f64, half_angle: f64) -> Result<Self> {
        let g = Self {
            apex,
            inner_radius,
            outer_radius,
            half_angle,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.apex.0.is_finite() && self.apex.1.is_finite()) {
            return Err(Error::param("apex", "must be finite"));
        }
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius) {
            return Err(Error::param(
                "inner_radius",
                format!(
                    "need 0 < inner_radius < outer_radius, got {} / {}",
                    self.inner_radius, self.outer_radius
                ),
            ));
        }
        if !(self.half_angle > 0.0 && self.half_angle < FRAC_PI_2) {
            return Err(Error::param(
                "half_angle",
                format!("need 0 < half_angle < pi/2, got {}", self.half_angle),
            ));
        }
        Ok(())
    }

    /// A sector whose apex sits above the top-center of a `width x height`
    /// image and whose arcs span the image.
    pub fn default_for(width: usize, height: usize) -> Self {
        let w = width as f64;
        let h = height as f64;
        let apex = ((w - 1.0) / 2.0, -0.1 * h);
        let inner = 0.1 * h + 1.0;
        let outer = 1.1 * h + 0.5 * w;
        Self {
            apex,
            inner_radius: inner,
            outer_radius: outer,
            half_angle: 1.0,
        }
    }

    /// Deflection angle of the pixel `(x, y)` from the `+y` axis, using the
    /// two-argument arctangent so the apex row is well defined.
    #[inline]
    pub fn deflection_angle(&self, x: f64, y: f64) -> f64 {
        (x - self.apex.0).atan2(y - self.apex.1)
    }

    #[inline]
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        (x - self.apex.0).hypot(y - self.apex.1)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let r = self.radius(x, y);
        r >= self.inner_radius && r <= self.outer_radius && self.deflection_angle(x, y).abs() <= self.half_angle
    }
}
