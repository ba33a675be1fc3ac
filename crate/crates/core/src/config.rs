//! Line-oriented run configuration: `section.key = value`, `#` comments.
//!
//! Every tunable of the pipeline and of the phantom generator has a
//! namespaced key. Absent keys keep their defaults; unknown keys, syntax
//! errors and out-of-range values are reported with the line number.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::SectorGeometry;
use crate::phantom::{Deformation, PhantomSpec, Shadow};
use crate::pipeline::PipelineConfig;

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seed for every random draw (phantoms only; registration is
    /// deterministic).
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub phantom: PhantomSpec,
    /// Slices of the phantom CT volume.
    pub phantom_depth: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
            phantom: PhantomSpec::standard(256, 256, 0),
            phantom_depth: 9,
        }
    }
}

const KEYS: &[&str] = &[
    "global.seed",
    "pipeline.half_window",
    "pipeline.window_center",
    "pipeline.window_width",
    "pipeline.denoise_method",
    "pipeline.gaussian_sigma",
    "pipeline.pre_denoised",
    "pipeline.max_shift",
    "pipeline.outside_mask_sigma",
    "pipeline.nmi_bins",
    "denoise.block_size",
    "denoise.search_radius",
    "denoise.max_group",
    "denoise.match_threshold",
    "denoise.hard_threshold",
    "denoise.noise_sigma",
    "life.lambda",
    "life.neighborhood_n",
    "life.soft_threshold",
    "life.enhancement_gain",
    "geom.apex_x",
    "geom.apex_y",
    "geom.inner_radius",
    "geom.outer_radius",
    "geom.half_angle",
    "rigid.max_iter",
    "rigid.step0",
    "rigid.step_shrink",
    "rigid.min_step",
    "rigid.bins",
    "rigid.fd_delta",
    "rigid.max_samples",
    "demons.sigma",
    "demons.max_iter",
    "demons.h",
    "demons.force",
    "demons.converge_tol",
    "demons.alpha_cap",
    "mi.window_n",
    "mi.bins",
    "mi.epsilon",
    "phantom.width",
    "phantom.height",
    "phantom.depth",
    "phantom.background",
    "phantom.liver_intensity",
    "phantom.texture",
    "phantom.texture_scale",
    "phantom.edge_softness",
    "phantom.landmark_count",
    "phantom.deform",
    "phantom.amplitude",
    "phantom.wavelength",
    "phantom.bump_x",
    "phantom.bump_y",
    "phantom.bump_dx",
    "phantom.bump_dy",
    "phantom.bump_sigma",
    "phantom.speckle_sigma",
    "phantom.boundary_gain",
    "phantom.shadow",
    "phantom.shadow_angle",
    "phantom.shadow_half_width",
    "phantom.shadow_start",
    "phantom.shadow_attenuation",
];

const GEOM_KEYS: [&str; 5] = ["geom.apex_x", "geom.apex_y", "geom.inner_radius", "geom.outer_radius", "geom.half_angle"];

/// Every accepted key, in the order `to_text` writes them.
pub fn known_keys() -> &'static [&'static str] {
    KEYS
}

struct Entries {
    values: HashMap<&'static str, (String, usize)>,
}

impl Entries {
    fn line(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, |(_, l)| *l)
    }

    fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn get<T: FromStr>(&self, key: &'static str, out: &mut T) -> Result<()> {
        if let Some((raw, line)) = self.values.get(key) {
            *out = raw.parse().map_err(|_| Error::Config {
                line: *line,
                reason: format!("`{key}`: cannot parse `{raw}`"),
            })?;
        }
        Ok(())
    }

    fn value<T: FromStr>(&self, key: &'static str, default: T) -> Result<T> {
        let mut v = default;
        self.get(key, &mut v)?;
        Ok(v)
    }

    /// Turns a module validation error into a config error naming the key.
    fn check(&self, section: &str, res: Result<()>) -> Result<()> {
        res.map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                let key = match (section, name) {
                    ("phantom", "size") => "phantom.width".to_string(),
                    ("phantom", "deform") => "phantom.deform".to_string(),
                    ("pipeline", "sigma") => "pipeline.gaussian_sigma".to_string(),
                    _ => format!("{section}.{name}"),
                };
                Error::Config {
                    line: self.line(&key),
                    reason: format!("`{key}`: {reason}"),
                }
            }
            other => Error::Config {
                line: 0,
                reason: format!("{section}: {other}"),
            },
        })
    }
}

/// Parses a configuration text; defaults fill absent keys.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut values = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config {
                line,
                reason: format!("expected `section.key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(Error::Config {
                line,
                reason: format!("`{key}` has no value"),
            });
        }
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(Error::Config {
                line,
                reason: format!("unknown key `{key}`"),
            });
        };
        if let Some((_, first)) = values.insert(known, (value.to_string(), line)) {
            return Err(Error::Config {
                line,
                reason: format!("`{key}` already set on line {first}"),
            });
        }
    }
    build(&Entries { values })
}

fn build(e: &Entries) -> Result<RunConfig> {
    let seed = e.value("global.seed", 0u64)?;

    let mut p = PipelineConfig::default();
    e.get("pipeline.half_window", &mut p.half_window)?;
    e.get("pipeline.window_center", &mut p.window_center)?;
    e.get("pipeline.window_width", &mut p.window_width)?;
    e.get("pipeline.denoise_method", &mut p.denoise_method)?;
    e.get("pipeline.gaussian_sigma", &mut p.gaussian_sigma)?;
    e.get("pipeline.pre_denoised", &mut p.pre_denoised)?;
    e.get("pipeline.max_shift", &mut p.max_shift)?;
    e.get("pipeline.outside_mask_sigma", &mut p.outside_mask_sigma)?;
    e.get("pipeline.nmi_bins", &mut p.nmi_bins)?;

    let d = &mut p.denoise;
    e.get("denoise.block_size", &mut d.block_size)?;
    e.get("denoise.search_radius", &mut d.search_radius)?;
    e.get("denoise.max_group", &mut d.max_group)?;
    e.get("denoise.match_threshold", &mut d.match_threshold)?;
    e.get("denoise.noise_sigma", &mut d.noise_sigma)?;
    // the hard threshold follows the noise level unless given explicitly
    d.hard_threshold = crate::denoise::DenoiseParams::for_sigma(d.noise_sigma).hard_threshold;
    e.get("denoise.hard_threshold", &mut d.hard_threshold)?;

    let l = &mut p.life;
    e.get("life.lambda", &mut l.lambda)?;
    e.get("life.neighborhood_n", &mut l.neighborhood_n)?;
    e.get("life.soft_threshold", &mut l.soft_threshold)?;
    e.get("life.enhancement_gain", &mut l.enhancement_gain)?;

    let r = &mut p.rigid;
    e.get("rigid.max_iter", &mut r.max_iter)?;
    e.get("rigid.step0", &mut r.step0)?;
    e.get("rigid.step_shrink", &mut r.step_shrink)?;
    e.get("rigid.min_step", &mut r.min_step)?;
    e.get("rigid.bins", &mut r.bins)?;
    e.get("rigid.fd_delta", &mut r.fd_delta)?;
    e.get("rigid.max_samples", &mut r.max_samples)?;

    let dm = &mut p.demons;
    e.get("demons.sigma", &mut dm.sigma)?;
    e.get("demons.max_iter", &mut dm.max_iter)?;
    e.get("demons.h", &mut dm.h)?;
    e.get("demons.force", &mut dm.force)?;
    e.get("demons.converge_tol", &mut dm.converge_tol)?;
    e.get("demons.alpha_cap", &mut dm.alpha_cap)?;
    e.get("mi.window_n", &mut dm.mi_params.window_n)?;
    e.get("mi.bins", &mut dm.mi_params.bins)?;
    e.get("mi.epsilon", &mut dm.mi_params.epsilon)?;

    let geom = match GEOM_KEYS.iter().filter(|k| e.has(k)).count() {
        0 => None,
        5 => {
            let g = SectorGeometry {
                apex: (e.value("geom.apex_x", 0.0)?, e.value("geom.apex_y", 0.0)?),
                inner_radius: e.value("geom.inner_radius", 0.0)?,
                outer_radius: e.value("geom.outer_radius", 0.0)?,
                half_angle: e.value("geom.half_angle", 0.0)?,
            };
            let line = GEOM_KEYS.iter().map(|k| e.line(k)).max().unwrap_or(0);
            g.validate().map_err(|err| Error::Config {
                line,
                reason: format!("geom: {err}"),
            })?;
            Some(g)
        }
        _ => {
            let line = GEOM_KEYS.iter().map(|k| e.line(k)).max().unwrap_or(0);
            return Err(Error::Config {
                line,
                reason: format!("sector geometry needs all of {}", GEOM_KEYS.join(", ")),
            });
        }
    };
    p.geom = geom;

    e.check("mi", p.demons.mi_params.validate())?;
    e.check("demons", p.demons.validate())?;
    e.check("denoise", p.denoise.validate())?;
    e.check("life", p.life.validate())?;
    e.check("rigid", p.rigid.validate())?;
    e.check("pipeline", p.validate())?;

    let phantom = build_phantom(e, seed, geom)?;
    let phantom_depth = e.value("phantom.depth", 9usize)?;
    if phantom_depth == 0 {
        return Err(Error::Config {
            line: e.line("phantom.depth"),
            reason: "`phantom.depth`: must be >= 1".into(),
        });
    }
    Ok(RunConfig {
        seed,
        pipeline: p,
        phantom,
        phantom_depth,
    })
}

fn build_phantom(e: &Entries, seed: u64, geom: Option<SectorGeometry>) -> Result<PhantomSpec> {
    let width = e.value("phantom.width", 256usize)?;
    let height = e.value("phantom.height", 256usize)?;
    let mut s = PhantomSpec::standard(width, height, seed);
    e.get("phantom.background", &mut s.background)?;
    e.get("phantom.liver_intensity", &mut s.liver_intensity)?;
    e.get("phantom.texture", &mut s.texture)?;
    e.get("phantom.texture_scale", &mut s.texture_scale)?;
    e.get("phantom.edge_softness", &mut s.edge_softness)?;
    e.get("phantom.landmark_count", &mut s.landmark_count)?;
    e.get("phantom.speckle_sigma", &mut s.us_style.speckle_sigma)?;
    e.get("phantom.boundary_gain", &mut s.us_style.boundary_gain)?;
    if let Some(g) = geom {
        s.geom = g;
    }

    let kind = e.value("phantom.deform", "none".to_string())?;
    s.deform = match kind.as_str() {
        "none" => Deformation::None,
        "sinusoidal" => Deformation::Sinusoidal {
            amplitude: e.value("phantom.amplitude", 4.0)?,
            wavelength: e.value("phantom.wavelength", 64.0)?,
        },
        "bump" => Deformation::GaussianBump {
            center: (
                e.value("phantom.bump_x", width as f64 / 2.0)?,
                e.value("phantom.bump_y", height as f64 / 2.0)?,
            ),
            amplitude: (e.value("phantom.bump_dx", 4.0)?, e.value("phantom.bump_dy", 0.0)?),
            sigma: e.value("phantom.bump_sigma", width.min(height) as f64 / 8.0)?,
        },
        other => {
            return Err(Error::Config {
                line: e.line("phantom.deform"),
                reason: format!("`phantom.deform`: expected none, sinusoidal or bump, got `{other}`"),
            })
        }
    };

    if e.value("phantom.shadow", false)? {
        s.us_style.shadow = Some(Shadow {
            angle: e.value("phantom.shadow_angle", 0.0)?,
            half_width: e.value("phantom.shadow_half_width", 0.05)?,
            start_radius: e.value("phantom.shadow_start", s.geom.inner_radius + 0.4 * (s.geom.outer_radius - s.geom.inner_radius))?,
            attenuation: e.value("phantom.shadow_attenuation", 0.3)?,
        });
    }

    for (key, v) in [
        ("phantom.background", s.background),
        ("phantom.liver_intensity", s.liver_intensity),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config {
                line: e.line(key),
                reason: format!("`{key}`: must lie in [0, 1], got {v}"),
            });
        }
    }
    for (key, v) in [
        ("phantom.texture", s.texture),
        ("phantom.texture_scale", s.texture_scale),
        ("phantom.edge_softness", s.edge_softness),
        ("phantom.speckle_sigma", s.us_style.speckle_sigma),
        ("phantom.boundary_gain", s.us_style.boundary_gain),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config {
                line: e.line(key),
                reason: format!("`{key}`: must be finite and >= 0, got {v}"),
            });
        }
    }
    e.check("phantom", s.validate())?;
    Ok(s)
}

impl RunConfig {
    /// Writes every key with its current value; parsing the result gives
    /// back an equal configuration.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let ph = &self.phantom;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("global.seed", self.seed.to_string());
        put("pipeline.half_window", p.half_window.to_string());
        put("pipeline.window_center", p.window_center.to_string());
        put("pipeline.window_width", p.window_width.to_string());
        put("pipeline.denoise_method", p.denoise_method.to_string());
        put("pipeline.gaussian_sigma", p.gaussian_sigma.to_string());
        put("pipeline.pre_denoised", p.pre_denoised.to_string());
        put("pipeline.max_shift", p.max_shift.to_string());
        put("pipeline.outside_mask_sigma", p.outside_mask_sigma.to_string());
        put("pipeline.nmi_bins", p.nmi_bins.to_string());
        put("denoise.block_size", p.denoise.block_size.to_string());
        put("denoise.search_radius", p.denoise.search_radius.to_string());
        put("denoise.max_group", p.denoise.max_group.to_string());
        put("denoise.match_threshold", p.denoise.match_threshold.to_string());
        put("denoise.hard_threshold", p.denoise.hard_threshold.to_string());
        put("denoise.noise_sigma", p.denoise.noise_sigma.to_string());
        put("life.lambda", p.life.lambda.to_string());
        put("life.neighborhood_n", p.life.neighborhood_n.to_string());
        put("life.soft_threshold", p.life.soft_threshold.to_string());
        put("life.enhancement_gain", p.life.enhancement_gain.to_string());
        if let Some(g) = &p.geom {
            put("geom.apex_x", g.apex.0.to_string());
            put("geom.apex_y", g.apex.1.to_string());
            put("geom.inner_radius", g.inner_radius.to_string());
            put("geom.outer_radius", g.outer_radius.to_string());
            put("geom.half_angle", g.half_angle.to_string());
        }
        put("rigid.max_iter", p.rigid.max_iter.to_string());
        put("rigid.step0", p.rigid.step0.to_string());
        put("rigid.step_shrink", p.rigid.step_shrink.to_string());
        put("rigid.min_step", p.rigid.min_step.to_string());
        put("rigid.bins", p.rigid.bins.to_string());
        put("rigid.fd_delta", p.rigid.fd_delta.to_string());
        put("rigid.max_samples", p.rigid.max_samples.to_string());
        put("demons.sigma", p.demons.sigma.to_string());
        put("demons.max_iter", p.demons.max_iter.to_string());
        put("demons.h", p.demons.h.to_string());
        put("demons.force", p.demons.force.to_string());
        put("demons.converge_tol", p.demons.converge_tol.to_string());
        put("demons.alpha_cap", p.demons.alpha_cap.to_string());
        put("mi.window_n", p.demons.mi_params.window_n.to_string());
        put("mi.bins", p.demons.mi_params.bins.to_string());
        put("mi.epsilon", p.demons.mi_params.epsilon.to_string());
        put("phantom.width", ph.size.0.to_string());
        put("phantom.height", ph.size.1.to_string());
        put("phantom.depth", self.phantom_depth.to_string());
        put("phantom.background", ph.background.to_string());
        put("phantom.liver_intensity", ph.liver_intensity.to_string());
        put("phantom.texture", ph.texture.to_string());
        put("phantom.texture_scale", ph.texture_scale.to_string());
        put("phantom.edge_softness", ph.edge_softness.to_string());
        put("phantom.landmark_count", ph.landmark_count.to_string());
        match ph.deform {
            Deformation::None => put("phantom.deform", "none".into()),
            Deformation::Sinusoidal { amplitude, wavelength } => {
                put("phantom.deform", "sinusoidal".into());
                put("phantom.amplitude", amplitude.to_string());
                put("phantom.wavelength", wavelength.to_string());
            }
            Deformation::GaussianBump { center, amplitude, sigma } => {
                put("phantom.deform", "bump".into());
                put("phantom.bump_x", center.0.to_string());
                put("phantom.bump_y", center.1.to_string());
                put("phantom.bump_dx", amplitude.0.to_string());
                put("phantom.bump_dy", amplitude.1.to_string());
                put("phantom.bump_sigma", sigma.to_string());
            }
        }
        put("phantom.speckle_sigma", ph.us_style.speckle_sigma.to_string());
        put("phantom.boundary_gain", ph.us_style.boundary_gain.to_string());
        put("phantom.shadow", ph.us_style.shadow.is_some().to_string());
        if let Some(sh) = ph.us_style.shadow {
            put("phantom.shadow_angle", sh.angle.to_string());
            put("phantom.shadow_half_width", sh.half_width.to_string());
            put("phantom.shadow_start", sh.start_radius.to_string());
            put("phantom.shadow_attenuation", sh.attenuation.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demons::ForceKind;

    fn line_of(err: Error) -> usize {
        match err {
            Error::Config { line, .. } => line,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("# only a comment\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn sets_demons_sigma() {
        let c = parse_config("demons.sigma = 2.5").unwrap();
        assert_eq!(c.pipeline.demons.sigma, 2.5);
        let c = parse_config("demons.force = intensity # mono-modal\n").unwrap();
        assert_eq!(c.pipeline.demons.force, ForceKind::Intensity);
    }

    #[test]
    fn range_error_names_key_and_line() {
        let err = parse_config("\n\ndemons.sigma = -1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("demons.sigma"), "{msg}");
        assert_eq!(line_of(err), 3);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse_config("demons.sigma = 1\ndemons.sigmaa = 2\n").unwrap_err();
        assert!(err.to_string().contains("demons.sigmaa"));
        assert_eq!(line_of(err), 2);
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(line_of(parse_config("a b c").unwrap_err()), 1);
        assert_eq!(line_of(parse_config("\ndemons.sigma =").unwrap_err()), 2);
        assert_eq!(line_of(parse_config("demons.max_iter = ten").unwrap_err()), 1);
        assert_eq!(line_of(parse_config("mi.bins = 8\nmi.bins = 9").unwrap_err()), 2);
    }

    #[test]
    fn noise_sigma_drives_hard_threshold() {
        let c = parse_config("denoise.noise_sigma = 0.1").unwrap();
        assert!((c.pipeline.denoise.hard_threshold - 0.27).abs() < 1e-12);
        let c = parse_config("denoise.noise_sigma = 0.1\ndenoise.hard_threshold = 0.5").unwrap();
        assert_eq!(c.pipeline.denoise.hard_threshold, 0.5);
    }

    #[test]
    fn partial_geometry_rejected() {
        assert!(parse_config("geom.apex_x = 10").is_err());
        let full = "geom.apex_x = 64\ngeom.apex_y = -8\ngeom.inner_radius = 10\ngeom.outer_radius = 140\ngeom.half_angle = 0.7";
        let c = parse_config(full).unwrap();
        assert_eq!(c.pipeline.geom.unwrap().apex, (64.0, -8.0));
        assert_eq!(c.phantom.geom.apex, (64.0, -8.0));
    }

    #[test]
    fn phantom_keys() {
        let c = parse_config("global.seed = 7\nphantom.width = 128\nphantom.height = 96\nphantom.deform = sinusoidal\nphantom.amplitude = 3\nphantom.wavelength = 32").unwrap();
        assert_eq!(c.phantom.size, (128, 96));
        assert_eq!(c.phantom.seed, 7);
        assert_eq!(c.phantom.deform, Deformation::Sinusoidal { amplitude: 3.0, wavelength: 32.0 });
        let err = parse_config("phantom.deform = sinusoidal\nphantom.amplitude = 30\nphantom.wavelength = 32").unwrap_err();
        assert!(err.to_string().contains("phantom.deform"));
        assert!(parse_config("phantom.deform = twist").is_err());
        assert!(parse_config("phantom.background = 1.5").is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "global.seed = 3\ndemons.sigma = 1.75\nphantom.deform = bump\nphantom.shadow = true\npipeline.pre_denoised = true\ndenoise.noise_sigma = 0.07";
        let c = parse_config(text).unwrap();
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(parse_config(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn every_written_key_is_known() {
        let c = parse_config("phantom.deform = bump\nphantom.shadow = true").unwrap();
        for line in c.to_text().lines() {
            let key = line.split('=').next().unwrap().trim();
            assert!(known_keys().contains(&key), "{key}");
        }
    }
}
