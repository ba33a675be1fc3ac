//! End-to-end CT/ultrasound registration and its evaluation metrics.

use std::time::Instant;

use crate::demons::{demons_register_from, DemonsParams};
use crate::denoise::{denoise_bm_2d, denoise_bm_3d, denoise_gaussian, DenoiseParams};
use crate::error::{Error, Result};
use crate::grid::{
    gaussian_blur, gaussian_blur_field, warp, window_level_volume, DeformationField2D, Image2D, Mask2D,
    SectorGeometry, Volume3D,
};
use crate::infometrics::{joint_histogram, nmi};
use crate::life::{enhance_slice, extract_edges, LifeParams};
use crate::rigid::{align_translation_2d_bins, register_affine, resample_volume_slice, AffineTransform3D, RigidSearchParams};

/// Stage names in execution order; the report's stage trace uses them.
pub const STAGES: [&str; 10] = [
    "window_level",
    "denoise_volume",
    "denoise_us",
    "extract_slice",
    "enhance_edges",
    "apply_mask",
    "translate_align",
    "demons",
    "blend_field",
    "resample_us",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseMethod {
    None,
    Gaussian,
    BlockMatching,
}

impl std::str::FromStr for DenoiseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "gaussian" => Ok(Self::Gaussian),
            "bm" => Ok(Self::BlockMatching),
            other => Err(Error::param("method", format!("expected none, gaussian or bm, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for DenoiseMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Gaussian => "gaussian",
            Self::BlockMatching => "bm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Slices on each side of the center slice used for slice extraction.
    pub half_window: usize,
    pub window_center: f64,
    pub window_width: f64,
    pub denoise_method: DenoiseMethod,
    pub denoise: DenoiseParams,
    /// Blur used by the Gaussian denoiser, pixels.
    pub gaussian_sigma: f64,
    /// Skip volume denoising; the volume was prepared beforehand.
    pub pre_denoised: bool,
    pub life: LifeParams,
    /// Sector geometry; the default fan for the image size when unset.
    pub geom: Option<SectorGeometry>,
    pub rigid: RigidSearchParams,
    /// Largest translation tried by the translation pre-alignment, pixels.
    pub max_shift: usize,
    pub demons: DemonsParams,
    pub outside_mask_sigma: f64,
    /// Histogram bins for the reported NMI values and translation search.
    pub nmi_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            half_window: 15,
            window_center: 0.5,
            window_width: 1.0,
            denoise_method: DenoiseMethod::BlockMatching,
            denoise: DenoiseParams::default(),
            gaussian_sigma: 1.0,
            pre_denoised: false,
            life: LifeParams::default(),
            geom: None,
            rigid: RigidSearchParams::default(),
            max_shift: 10,
            demons: DemonsParams::default(),
            outside_mask_sigma: 6.0,
            nmi_bins: 64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.half_window < 1 {
            return Err(Error::param("half_window", "must be >= 1"));
        }
        if !(self.window_width > 0.0) {
            return Err(Error::param("window_width", "must be > 0"));
        }
        if !(self.gaussian_sigma >= 0.0) || !(self.outside_mask_sigma >= 0.0) {
            return Err(Error::param("sigma", "blur widths must be >= 0"));
        }
        if !(2..=256).contains(&self.nmi_bins) {
            return Err(Error::param("nmi_bins", "must lie in 2..=256"));
        }
        self.denoise.validate()?;
        self.life.validate()?;
        self.rigid.validate()?;
        self.demons.validate()?;
        if let Some(g) = &self.geom {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub name: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkErrors {
    pub mean_before: f64,
    pub max_before: f64,
    pub mean_after: f64,
    pub max_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    /// NMI of the enhanced slice and the denoised ultrasound inside the mask,
    /// before any in-plane alignment.
    pub nmi_before: f64,
    /// Same, with the ultrasound warped by the final field.
    pub nmi_after: f64,
    pub landmarks: Option<LandmarkErrors>,
    pub slice_transform: AffineTransform3D,
    pub slice_nmi_initial: f64,
    pub slice_nmi_final: f64,
    pub translation: (i32, i32),
    pub iterations: usize,
    pub converged: bool,
    pub stages: Vec<StageTiming>,
}

impl RegistrationReport {
    pub fn total_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    /// Line-oriented `key=value` rendering. Wall times are listed last.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("nmi_before", format!("{:.6}", self.nmi_before));
        kv("nmi_after", format!("{:.6}", self.nmi_after));
        if let Some(l) = &self.landmarks {
            kv("landmark_mean_before", format!("{:.4}", l.mean_before));
            kv("landmark_max_before", format!("{:.4}", l.max_before));
            kv("landmark_mean_after", format!("{:.4}", l.mean_after));
            kv("landmark_max_after", format!("{:.4}", l.max_after));
        }
        kv("slice_transform", self.slice_transform.to_string());
        kv("slice_nmi_initial", format!("{:.6}", self.slice_nmi_initial));
        kv("slice_nmi_final", format!("{:.6}", self.slice_nmi_final));
        kv("translation", format!("{} {}", self.translation.0, self.translation.1));
        kv("iterations", self.iterations.to_string());
        kv("converged", self.converged.to_string());
        kv("stages", self.stages.iter().map(|s| s.name).collect::<Vec<_>>().join(","));
        for s in &self.stages {
            kv(&format!("time.{}", s.name), format!("{:.4}", s.seconds));
        }
        kv("time.total", format!("{:.4}", self.total_seconds()));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub warped_us: Image2D,
    pub field: DeformationField2D,
    /// The enhanced corresponding CT slice (the fixed image).
    pub slice: Image2D,
    pub report: RegistrationReport,
}

/// Corresponding landmark positions: `fixed[i]` in slice coordinates
/// matches `moving[i]` in ultrasound coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub fixed: Vec<(f64, f64)>,
    pub moving: Vec<(f64, f64)>,
}

/// Keeps the field inside the mask and replaces it outside by its Gaussian
/// blur, so the deformation fades out smoothly past the mask boundary.
pub fn blend_field_outside_mask(field: &DeformationField2D, mask: &Mask2D, sigma: f64) -> Result<DeformationField2D> {
    mask.check_dims(field.dims(), "blend mask")?;
    if mask.is_full() {
        return Ok(field.clone());
    }
    let blurred = gaussian_blur_field(field, sigma)?;
    let (w, h) = field.dims();
    let bits = mask.bits();
    Ok(DeformationField2D::from_fn(w, h, |x, y| {
        if bits[y * w + x] {
            field.get(x, y)
        } else {
            blurred.get(x, y)
        }
    }))
}

/// Mean and max of `|p_fixed + T(p_fixed) - p_moving|` over the pairs,
/// with bilinear sampling of `T`.
///
/// `T` follows the warp convention `out(p) = moving(p + T(p))`, so it is
/// defined on the fixed grid and points at the moving position.
pub fn landmark_error(points_fixed: &[(f64, f64)], points_moving: &[(f64, f64)], field: &DeformationField2D) -> Result<(f64, f64)> {
    if points_fixed.len() != points_moving.len() {
        return Err(Error::InvalidData(format!(
            "landmark lists differ in length: {} vs {}",
            points_fixed.len(),
            points_moving.len()
        )));
    }
    if points_fixed.is_empty() {
        return Err(Error::InvalidData("no landmarks".into()));
    }
    let errs: Vec<f64> = points_fixed
        .iter()
        .zip(points_moving)
        .map(|(&(fx, fy), &(mx, my))| {
            let (tx, ty) = field.sample(fx, fy);
            (fx + tx - mx).hypot(fy + ty - my)
        })
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((mean, errs.iter().copied().fold(0.0, f64::max)))
}

fn masked_nmi(a: &Image2D, b: &Image2D, mask: &Mask2D, bins: usize) -> Result<f64> {
    nmi(&joint_histogram(a, b, bins, Some(mask))?)
}

struct Clock {
    stages: Vec<StageTiming>,
    t: Instant,
}

impl Clock {
    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            name,
            seconds: (now - self.t).as_secs_f64(),
        });
        log::info!("stage {name}: {:.3} s", (now - self.t).as_secs_f64());
        self.t = now;
    }
}

/// Runs the whole registration: windowing, denoising, corresponding slice
/// extraction, edge enhancement, masking, translation pre-alignment, Demons,
/// outside-mask smoothing and resampling of the ultrasound image.
///
/// The volume's center slice `depth / 2` is the starting guess for the
/// corresponding slice.
pub fn run_pipeline(
    vol: &Volume3D,
    us: &Image2D,
    liver_mask: &Mask2D,
    cfg: &PipelineConfig,
    landmarks: Option<&Landmarks>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (w, h, d) = vol.dims();
    if us.dims() != (w, h) {
        return Err(Error::DimensionMismatch {
            what: "ultrasound vs volume slice",
            left: (us.width(), us.height(), 1),
            right: (w, h, 1),
        });
    }
    liver_mask.check_dims((w, h), "liver mask")?;
    if liver_mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    if let Some(l) = landmarks {
        if l.fixed.len() != l.moving.len() || l.fixed.is_empty() {
            return Err(Error::InvalidData("landmark lists must be non-empty and of equal length".into()));
        }
    }
    let geom = cfg.geom.unwrap_or_else(|| SectorGeometry::default_for(w, h));
    let mut clock = Clock {
        stages: Vec::with_capacity(STAGES.len()),
        t: Instant::now(),
    };

    // only the slices around the center take part, so window those alone
    let center = d / 2;
    let z0 = center.saturating_sub(cfg.half_window);
    let count = (center + cfg.half_window + 1).min(d) - z0;
    let sub = vol
        .sub_volume(z0, count)
        .and_then(|v| window_level_volume(&v, cfg.window_center, cfg.window_width))
        .map_err(|e| e.in_stage(STAGES[0]))?;
    clock.lap(STAGES[0]);

    let sub = if cfg.pre_denoised {
        sub
    } else {
        match cfg.denoise_method {
            DenoiseMethod::None => Ok(sub),
            DenoiseMethod::BlockMatching => denoise_bm_3d(&sub, &cfg.denoise),
            DenoiseMethod::Gaussian => (0..sub.depth())
                .map(|k| {
                    let s = Image2D::from_raw(w, h, sub.slice_data(k).to_vec());
                    denoise_gaussian(&s, cfg.gaussian_sigma)
                })
                .collect::<Result<Vec<_>>>()
                .and_then(|s| Volume3D::from_slices(&s)),
        }
        .map_err(|e| e.in_stage(STAGES[1]))?
    };
    clock.lap(STAGES[1]);

    let us_dn = match cfg.denoise_method {
        DenoiseMethod::None => Ok(us.clone()),
        DenoiseMethod::BlockMatching => denoise_bm_2d(us, &cfg.denoise),
        DenoiseMethod::Gaussian => gaussian_blur(us, cfg.gaussian_sigma),
    }
    .map_err(|e| e.in_stage(STAGES[2]))?;
    clock.lap(STAGES[2]);

    let k = center - z0;
    let rigid = register_affine(&sub, &us_dn, k, &cfg.rigid).map_err(|e| e.in_stage(STAGES[3]))?;
    let slice = resample_volume_slice(&sub, &rigid.transform, k).map_err(|e| e.in_stage(STAGES[3]))?;
    clock.lap(STAGES[3]);

    let enhanced = extract_edges(&slice, &geom, &cfg.life)
        .and_then(|edges| enhance_slice(&slice, &edges, cfg.life.enhancement_gain))
        .map_err(|e| e.in_stage(STAGES[4]))?;
    clock.lap(STAGES[4]);

    let fixed = liver_mask.apply(&enhanced).map_err(|e| e.in_stage(STAGES[5]))?;
    let us_masked = liver_mask.apply(&us_dn).map_err(|e| e.in_stage(STAGES[5]))?;
    clock.lap(STAGES[5]);

    let (dx, dy) = align_translation_2d_bins(&fixed, &us_masked, liver_mask, cfg.max_shift, cfg.nmi_bins)
        .map_err(|e| e.in_stage(STAGES[6]))?;
    let shift = DeformationField2D::uniform(w, h, dx as f64, dy as f64);
    clock.lap(STAGES[6]);

    // the moving image is the translated ultrasound cut by the same mask
    let moving = warp(&us_dn, &shift)
        .and_then(|m| liver_mask.apply(&m))
        .map_err(|e| e.in_stage(STAGES[7]))?;
    let outcome = demons_register_from(&fixed, &moving, Some(liver_mask), &cfg.demons, DeformationField2D::zeros(w, h))
        .map_err(|e| e.in_stage(STAGES[7]))?;
    clock.lap(STAGES[7]);

    let mut field = outcome.field.clone();
    field.add_scaled(&shift, 1.0).map_err(|e| e.in_stage(STAGES[8]))?;
    let field = blend_field_outside_mask(&field, liver_mask, cfg.outside_mask_sigma).map_err(|e| e.in_stage(STAGES[8]))?;
    clock.lap(STAGES[8]);

    let warped_us = warp(&us_dn, &field).map_err(|e| e.in_stage(STAGES[9]))?;
    clock.lap(STAGES[9]);

    let nmi_before = masked_nmi(&fixed, &us_masked, liver_mask, cfg.nmi_bins)?;
    let nmi_after = masked_nmi(&fixed, &liver_mask.apply(&warped_us)?, liver_mask, cfg.nmi_bins)?;
    let landmarks = match landmarks {
        Some(l) => {
            let zero = DeformationField2D::zeros(w, h);
            let (mean_before, max_before) = landmark_error(&l.fixed, &l.moving, &zero)?;
            let (mean_after, max_after) = landmark_error(&l.fixed, &l.moving, &field)?;
            Some(LandmarkErrors {
                mean_before,
                max_before,
                mean_after,
                max_after,
            })
        }
        None => None,
    };
    let report = RegistrationReport {
        nmi_before,
        nmi_after,
        landmarks,
        slice_transform: rigid.transform,
        slice_nmi_initial: rigid.nmi_initial,
        slice_nmi_final: rigid.nmi_final,
        translation: (dx, dy),
        iterations: outcome.iterations,
        converged: outcome.converged,
        stages: clock.stages,
    };
    Ok(PipelineOutput {
        warped_us,
        field,
        slice: enhanced,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmark_error_examples() {
        let zero = DeformationField2D::zeros(16, 16);
        let pts = vec![(3.0, 4.0), (8.5, 2.25)];
        assert_eq!(landmark_error(&pts, &pts, &zero).unwrap(), (0.0, 0.0));
        assert_eq!(landmark_error(&[(2.0, 2.0)], &[(5.0, 6.0)], &zero).unwrap(), (5.0, 5.0));
        let f = DeformationField2D::from_fn(16, 16, |x, y| (0.1 * x as f64, -0.05 * y as f64));
        let fixed = vec![(4.0, 5.0), (10.25, 7.5)];
        let moving: Vec<(f64, f64)> = fixed.iter().map(|&(x, y)| (x + 0.1 * x, y - 0.05 * y)).collect();
        let (mean, max) = landmark_error(&fixed, &moving, &f).unwrap();
        assert!(mean < 1e-9 && max < 1e-9);
        assert!(landmark_error(&pts, &pts[..1], &zero).is_err());
        assert!(landmark_error(&[], &[], &zero).is_err());
    }

    #[test]
    fn blend_uniform_and_full_mask() {
        let f = DeformationField2D::uniform(20, 20, 1.5, -0.5);
        let mask = Mask2D::from_fn(20, 20, |x, y| x > 5 && y > 5 && x < 12 && y < 12);
        let out = blend_field_outside_mask(&f, &mask, 3.0).unwrap();
        for (a, b) in out.vx().iter().zip(f.vx()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = DeformationField2D::from_fn(20, 20, |x, y| (x as f64, (x * y) as f64));
        assert_eq!(blend_field_outside_mask(&g, &Mask2D::full(20, 20), 3.0).unwrap(), g);
    }

    #[test]
    fn blend_decays_outside() {
        let mask = Mask2D::from_fn(41, 41, |x, y| (x as i32 - 20).abs() <= 3 && (y as i32 - 20).abs() <= 3);
        let f = DeformationField2D::from_fn(41, 41, |x, y| if mask.get(x, y) { (2.0, 0.0) } else { (0.0, 0.0) });
        let out = blend_field_outside_mask(&f, &mask, 3.0).unwrap();
        assert_eq!(out.get(20, 20), (2.0, 0.0));
        let ray: Vec<f64> = (24..41).map(|x| out.get(x, 20).0).collect();
        assert!(ray.windows(2).all(|p| p[1] <= p[0]));
        assert!(ray[0] > 0.5 && ray[ray.len() - 1] < 1e-3);
        // the jump across the boundary shrinks
        let jump = (out.get(23, 20).0 - out.get(24, 20).0).abs();
        assert!(jump <= 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            half_window: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("bm".parse::<DenoiseMethod>().unwrap(), DenoiseMethod::BlockMatching);
        assert!("bm4d".parse::<DenoiseMethod>().is_err());
    }
}
