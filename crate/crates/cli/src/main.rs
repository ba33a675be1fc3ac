use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use usct::config::{parse_config, RunConfig};
use usct::demons::{demons_register, DemonsParams, ForceKind};
use usct::denoise::{denoise_bm_2d, denoise_bm_3d, denoise_gaussian, DenoiseParams};
use usct::grid::{warp, Mask2D, SectorGeometry};
use usct::infometrics::{joint_histogram, mutual_information, nmi};
use usct::io;
use usct::life::{enhance_slice, extract_edges, LifeParams};
use usct::overlay::fuse_overlay;
use usct::phantom::make_phantom_case;
use usct::pipeline::{run_pipeline, Landmarks};
use usct::rigid::{register_affine, resample_volume_slice, RigidSearchParams};

/// Ultrasound to CT deformable registration toolkit.
#[derive(Parser, Debug)]
#[command(name = "usct", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log: LogLevel,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DenoiseKind {
    Gaussian,
    Bm2d,
    Bm3d,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Denoise an image (gaussian, bm2d) or a volume (bm3d).
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = DenoiseKind::Bm2d)]
        method: DenoiseKind,
        /// Noise level for block matching, blur width for gaussian.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long)]
        search_radius: Option<usize>,
    },
    /// Find the CT slice matching an ultrasound image.
    ExtractSlice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        us: PathBuf,
        /// Center slice index (default: middle of the volume).
        #[arg(long)]
        center: Option<usize>,
        #[arg(long, default_value_t = 15)]
        half_window: usize,
        #[arg(long)]
        out_slice: PathBuf,
        #[arg(long)]
        out_transform: Option<PathBuf>,
    },
    /// Radial fuzzy-entropy edge map and boundary-enhanced slice.
    Enhance {
        #[arg(long)]
        slice: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        apex_x: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        apex_y: Option<f64>,
        #[arg(long)]
        lambda: Option<u32>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        gain: Option<f64>,
        #[arg(long)]
        out_edges: Option<PathBuf>,
        #[arg(long)]
        out_enhanced: Option<PathBuf>,
    },
    /// Demons registration of two images; exit code 2 if it did not converge.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "mi")]
        force: String,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_warped: Option<PathBuf>,
    },
    /// Full registration workflow; exit code 2 if Demons did not converge.
    Pipeline {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        us: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV rows `fx,fy,mx,my`.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Skip volume denoising.
        #[arg(long)]
        pre_denoised: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic CT volume, ultrasound image, mask, field and landmarks.
    Phantom {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Entropies, MI and NMI of an image pair.
    Evaluate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.log {
        LogLevel::Quiet => log::LevelFilter::Error,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.cmd) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Denoise {
            input,
            output,
            method,
            sigma,
            block_size,
            search_radius,
        } => {
            let mut params = sigma.map_or_else(DenoiseParams::default, DenoiseParams::for_sigma);
            if let Some(b) = block_size {
                params.block_size = b;
            }
            if let Some(r) = search_radius {
                params.search_radius = r;
            }
            match method {
                DenoiseKind::Gaussian => {
                    let img = io::read_image(&input)?;
                    io::write_image(&output, &denoise_gaussian(&img, sigma.unwrap_or(1.0))?)?;
                }
                DenoiseKind::Bm2d => {
                    let img = io::read_image(&input)?;
                    io::write_image(&output, &denoise_bm_2d(&img, &params)?)?;
                }
                DenoiseKind::Bm3d => {
                    let vol = io::read_volume(&input)?;
                    io::write_volume(&output, &denoise_bm_3d(&vol, &params)?)?;
                }
            }
            info!("wrote {}", output.display());
            Ok(Outcome::Done)
        }
        Command::ExtractSlice {
            volume,
            us,
            center,
            half_window,
            out_slice,
            out_transform,
        } => {
            let vol = io::read_volume(&volume)?;
            let us = io::read_image(&us)?;
            let d = vol.depth();
            let center = center.unwrap_or(d / 2);
            if center >= d {
                bail!("--center {center} outside a volume of {d} slices");
            }
            let z0 = center.saturating_sub(half_window);
            let sub = vol.sub_volume(z0, (center + half_window + 1).min(d) - z0)?;
            let reg = register_affine(&sub, &us, center - z0, &RigidSearchParams::default())?;
            let slice = resample_volume_slice(&sub, &reg.transform, center - z0)?;
            info!(
                "slice NMI {:.4} -> {:.4} after {} iterations",
                reg.nmi_initial, reg.nmi_final, reg.iterations
            );
            io::write_image(&out_slice, &slice)?;
            if let Some(path) = out_transform {
                fs::write(&path, format!("{}\n", reg.transform.offset_z(z0 as f64)))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(Outcome::Done)
        }
        Command::Enhance {
            slice,
            apex_x,
            apex_y,
            lambda,
            n,
            threshold,
            gain,
            out_edges,
            out_enhanced,
        } => {
            let img = io::read_image(&slice)?;
            let mut geom = SectorGeometry::default_for(img.width(), img.height());
            geom.apex = (apex_x.unwrap_or(geom.apex.0), apex_y.unwrap_or(geom.apex.1));
            let mut p = LifeParams::default();
            p.lambda = lambda.unwrap_or(p.lambda);
            p.neighborhood_n = n.unwrap_or(p.neighborhood_n);
            p.soft_threshold = threshold.unwrap_or(p.soft_threshold);
            p.enhancement_gain = gain.unwrap_or(p.enhancement_gain);
            if out_edges.is_none() && out_enhanced.is_none() {
                bail!("nothing to write: give --out-edges and/or --out-enhanced");
            }
            let edges = extract_edges(&img, &geom, &p)?;
            if let Some(path) = out_edges {
                io::write_image(&path, &edges)?;
            }
            if let Some(path) = out_enhanced {
                io::write_image(&path, &enhance_slice(&img, &edges, p.enhancement_gain)?)?;
            }
            Ok(Outcome::Done)
        }
        Command::Register {
            fixed,
            moving,
            mask,
            force,
            sigma,
            max_iter,
            out_field,
            out_warped,
        } => {
            let fixed = io::read_image(&fixed)?;
            let moving = io::read_image(&moving)?;
            let mask = mask.map(|m| io::read_mask(&m)).transpose()?;
            let mut params = DemonsParams {
                force: force.parse::<ForceKind>()?,
                ..Default::default()
            };
            params.sigma = sigma.unwrap_or(params.sigma);
            params.max_iter = max_iter.unwrap_or(params.max_iter);
            let out = demons_register(&fixed, &moving, mask.as_ref(), &params)?;
            io::write_field(&out_field, &out.field)?;
            if let Some(path) = out_warped {
                io::write_image(&path, &warp(&moving, &out.field)?)?;
            }
            info!("{} iterations, converged: {}", out.iterations, out.converged);
            Ok(if out.converged { Outcome::Done } else { Outcome::NotConverged })
        }
        Command::Pipeline {
            volume,
            us,
            mask,
            config,
            landmarks,
            pre_denoised,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?.pipeline;
            cfg.pre_denoised |= pre_denoised;
            let vol = io::read_volume(&volume)?;
            let us = io::read_image(&us)?;
            let mask = io::read_mask(&mask)?;
            let landmarks = landmarks
                .map(|p| io::read_landmarks(&p))
                .transpose()?
                .map(|pairs| Landmarks {
                    fixed: pairs.iter().map(|p| p.0).collect(),
                    moving: pairs.iter().map(|p| p.1).collect(),
                });
            let out = run_pipeline(&vol, &us, &mask, &cfg, landmarks.as_ref())?;
            fs::create_dir_all(&out_dir)?;
            io::write_image(&out_dir.join("warped_us.pgm"), &out.warped_us)?;
            io::write_image(&out_dir.join("slice.pgm"), &out.slice)?;
            io::write_field(&out_dir.join("field.f32fld"), &out.field)?;
            fs::write(out_dir.join("overlay.ppm"), fuse_overlay(&out.slice, &out.warped_us)?.to_ppm())?;
            fs::write(out_dir.join("report.txt"), out.report.to_text())?;
            info!(
                "NMI {:.4} -> {:.4}, {} demons iterations, {:.2} s",
                out.report.nmi_before,
                out.report.nmi_after,
                out.report.iterations,
                out.report.total_seconds()
            );
            Ok(if out.report.converged { Outcome::Done } else { Outcome::NotConverged })
        }
        Command::Phantom { spec, out_dir } => {
            let cfg = load_config(spec.as_deref())?;
            let case = make_phantom_case(&cfg.phantom, cfg.phantom_depth)?;
            fs::create_dir_all(&out_dir)?;
            io::write_volume(&out_dir.join("ct.f32vol"), &case.volume)?;
            io::write_image(&out_dir.join("ct_slice.pgm"), &case.ct.image)?;
            io::write_image(&out_dir.join("us.pgm"), &case.us)?;
            io::write_image(&out_dir.join("mask.pgm"), &case.ct.mask.to_image())?;
            io::write_field(&out_dir.join("field.f32fld"), &case.truth)?;
            let pairs: Vec<_> = case.ct.landmarks.iter().copied().zip(case.moving_landmarks.iter().copied()).collect();
            io::write_landmarks(&out_dir.join("landmarks.csv"), &pairs)?;
            fs::write(out_dir.join("spec.cfg"), cfg.to_text())?;
            info!("wrote phantom to {}", out_dir.display());
            Ok(Outcome::Done)
        }
        Command::Evaluate { a, b, bins, mask } => {
            let a = io::read_image(&a)?;
            let b = io::read_image(&b)?;
            let mask: Option<Mask2D> = mask.map(|m| io::read_mask(&m)).transpose()?;
            let h = joint_histogram(&a, &b, bins, mask.as_ref())?;
            println!("H(A)={:.6}", h.entropy_a());
            println!("H(B)={:.6}", h.entropy_b());
            println!("H(A,B)={:.6}", h.joint_entropy());
            println!("MI={:.6}", mutual_information(&h));
            match nmi(&h) {
                Ok(v) => println!("NMI={v:.6}"),
                Err(_) => println!("NMI=undefined"),
            }
            Ok(Outcome::Done)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}
