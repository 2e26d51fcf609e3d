//! `vecmorph`: train, encode, decode, evaluate, gradient-check and render.
//!
//! stdout carries only results; diagnostics go to stderr, filtered by
//! `MORPH_LOG` (`error`, `info` or `debug`; default `warn`). Exit status is
//! 0 on success, 1 on I/O, parse, bit-length or geometry errors and 2 when
//! training diverges.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmorph::augment::AugmentConfig;
use vecmorph::codec::{BitString, Model};
use vecmorph::rectify::{self, CameraIntrinsics, KeypointSource};
use vecmorph::softraster::{self, hard_rasterize, Image, RasterConfig};
use vecmorph::trainer::{self, TrainConfig, TrainError};
use vecmorph::vecdraw::Drawing;

#[derive(Parser)]
#[command(
    name = "vecmorph",
    version,
    about = "Hide bitstrings in vector drawings"
)]
struct Cli {
    /// Worker threads for batch-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DrawingArgs {
    /// SVG drawing.
    #[arg(long)]
    drawing: PathBuf,
    /// Bounds sidecar JSON.
    #[arg(long)]
    bounds: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder/decoder pair for a drawing.
    Train {
        #[command(flatten)]
        drawing: DrawingArgs,
        /// Training config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Overrides `rng_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode bits into the drawing; writes the morphed SVG and its raster.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        drawing: DrawingArgs,
        /// Big-endian hex; bit 0 is the most significant bit of the first digit.
        #[arg(long)]
        bits: String,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        png: PathBuf,
    },
    /// Decode a PNG; prints hex, then per-bit probabilities, then the pose.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON array of [x, y] photo positions in keypoint order; without
        /// it the image must already be in the decoder frame.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// JSON {fx, fy, cx, cy}; enables pose recovery.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
    },
    /// Measure bit and message accuracy on random bitstrings.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        drawing: DrawingArgs,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Augmentation config JSON; defaults are used when omitted.
        #[arg(long)]
        augment: Option<PathBuf>,
        /// Decode clean hard rasters.
        #[arg(long, conflicts_with = "augment")]
        clean: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare soft-raster tape gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        drawing: DrawingArgs,
        #[arg(long, default_value_t = 20.0)]
        s: f64,
        #[arg(long, default_value_t = 20.0)]
        t: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Step as a fraction of each variable's half-range (capped at 1 unit).
        /// Larger steps straddle sub-pixel edges and SDF kinks.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Rasterize the nominal drawing to PNG.
    Render {
        #[command(flatten)]
        drawing: DrawingArgs,
        #[arg(long)]
        png: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Soft raster sharpness; hard raster when omitted.
        #[arg(long)]
        soft: Option<f64>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_drawing(a: &DrawingArgs) -> Result<Drawing> {
    let svg = read_text(&a.drawing)?;
    let bounds = read_text(&a.bounds)?;
    Drawing::parse(&svg, &bounds).with_context(|| format!("cannot parse {}", a.drawing.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load_file(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .with_context(|| format!("cannot parse {}", path.display()))
}

fn write_png(img: &Image, path: &Path) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    img.write_png(f)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Exit status 0 for success or a passed check, 1 for a failed check.
fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            drawing,
            config,
            out,
            metrics,
            seed,
        } => {
            let d = load_drawing(&drawing)?;
            let mut cfg: TrainConfig = match config {
                Some(p) => load_json(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            cfg.checkpoint_path = Some(out.clone());
            cfg.metrics_path = Some(metrics.unwrap_or_else(|| out.with_extension("csv")));
            let outcome = trainer::train(&d, &cfg)?;
            let last = outcome.metrics.last().map(|m| m.bit_acc).unwrap_or(0.0);
            log::info!(
                "trained {} steps, final batch bit accuracy {last}",
                outcome.metrics.len()
            );
        }
        Command::Encode {
            model,
            drawing,
            bits,
            svg,
            png,
        } => {
            let m = load_model(&model)?;
            let d = load_drawing(&drawing)?;
            let b = BitString::from_hex(&bits, m.config.n_bits)?;
            let delta = m.encode_delta(&d, &b)?;
            let morphed = d.apply_perturbation(&delta)?;
            fs::write(&svg, morphed.emit_svg())
                .with_context(|| format!("cannot write {}", svg.display()))?;
            let img = hard_rasterize(&d, &delta, m.config.raster.width, m.config.raster.height)?;
            write_png(&img, &png)?;
        }
        Command::Decode {
            model,
            image,
            keypoints,
            intrinsics,
        } => {
            let m = load_model(&model)?;
            let f = fs::File::open(&image)
                .with_context(|| format!("cannot open {}", image.display()))?;
            let photo =
                Image::read_png(f).with_context(|| format!("cannot decode {}", image.display()))?;
            let source = match keypoints {
                Some(p) => KeypointSource::Points(load_json(&p)?),
                None => KeypointSource::Rectified,
            };
            let k: Option<CameraIntrinsics> = intrinsics.map(|p| load_json(&p)).transpose()?;
            if k.is_some() && matches!(source, KeypointSource::Rectified) {
                bail!("pose recovery needs --keypoints");
            }
            let decoded = rectify::rectify_and_decode(&photo, &m, &source, k.as_ref())?;
            println!("{}", decoded.bits.to_hex());
            println!("{}", serde_json::to_string(&decoded.probits.0)?);
            if let Some(pose) = decoded.pose {
                println!("{}", pose.to_json());
            }
        }
        Command::Eval {
            model,
            drawing,
            samples,
            augment,
            clean,
            seed,
        } => {
            let m = load_model(&model)?;
            let d = load_drawing(&drawing)?;
            let aug: Option<AugmentConfig> = match (clean, augment) {
                (true, _) => None,
                (false, Some(p)) => Some(load_json(&p)?),
                (false, None) => Some(AugmentConfig::default()),
            };
            let r = trainer::evaluate(&m, &d, samples, aug.as_ref(), seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "n_samples": r.n_samples,
                    "bit_accuracy": r.bit_accuracy,
                    "message_accuracy": r.message_accuracy,
                })
            );
        }
        Command::Gradcheck {
            drawing,
            s,
            t,
            size,
            eps,
            seed,
            tolerance,
        } => {
            let d = load_drawing(&drawing)?;
            let cfg = RasterConfig {
                width: size,
                height: size,
                s,
                t,
                layering: true,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delta: Vec<f64> = d
                .variables
                .iter()
                .map(|v| rng.gen_range(-0.5..0.5) * v.half_range())
                .collect();
            let weights: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
            let checks = softraster::gradcheck(&d, &delta, &weights, &cfg, eps)?;
            let mut worst = 0.0f64;
            for (j, c) in checks.iter().enumerate() {
                println!("{j} {:.3e}", c.rel_err);
                worst = worst.max(c.rel_err);
            }
            log::info!(
                "max relative error {worst:.3e} over {} variables",
                checks.len()
            );
            if worst >= tolerance {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Render {
            drawing,
            png,
            size,
            soft,
        } => {
            let d = load_drawing(&drawing)?;
            let nominal = vec![0.0; d.n_vars()];
            let img = match soft {
                Some(st) => {
                    let cfg = RasterConfig {
                        width: size,
                        height: size,
                        s: st,
                        t: st,
                        layering: true,
                    };
                    softraster::soft_rasterize_values(&d, &nominal, &cfg)?
                }
                None => hard_rasterize(&d, &nominal, size, size)?,
            };
            write_png(&img, &png)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MORPH_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(
                e.downcast_ref::<TrainError>(),
                Some(TrainError::Diverged { .. })
            ) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
