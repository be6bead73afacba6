use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use lh2face::depth_renderer::{
    intrinsics_from_fov, make_canvas, render_hemisphere_demo, scene_pivot, warp_image, write_demo_frames, DepthMap,
    Pose, RgbImage,
};
use lh2face::io_formats::{
    metrics_to_string, read_pgm, read_ppm, read_tensor, write_pgm, write_ppm, MetricRecord, Raster, RunConfig,
};
use lh2face::sphere_stats::{
    evt_estimate, half_quarter_cosines, min_quantile, min_quantile_exact, monte_carlo_pairwise,
};
use lh2face::train_harness::{build_dataset, grad_check, histogram_dump, load_checkpoint, train};
use lh2face::Error;
use ndarray::Array2;

const EXIT_FAILURE: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lh2",
    version,
    about = "Hypersphere embedding losses: training, statistics and depth rendering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the synthetic linear embedder.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the directory holding the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Closed-form nearest-pair estimates with a Monte-Carlo check, as one CSV row.
    Stats {
        #[arg(long = "C", alias = "classes")]
        c: usize,
        #[arg(long = "d", alias = "dim")]
        d: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tail probability for the minimum-quantile columns.
        #[arg(long, default_value_t = 0.999)]
        p: f64,
    },
    /// Re-render a depth map and image under a rigid pose.
    Render {
        #[arg(long, value_enum, conflicts_with_all = ["depth", "albedo", "pose"])]
        demo: Option<Demo>,
        /// `.lh2t` 2-D tensor or 16-bit `.pgm`. Non-positive depths are holes.
        #[arg(long, requires_all = ["albedo", "pose"])]
        depth: Option<PathBuf>,
        #[arg(long)]
        albedo: Option<PathBuf>,
        /// Nine row-major rotation entries then the translation, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        pose: Option<Vec<f64>>,
        #[arg(long, default_value_t = 30.0)]
        fov: f64,
        #[arg(long, default_value_t = 1)]
        radius: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every loss gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Cosine histograms of a trained checkpoint.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; by default `config.txt` next to the checkpoints directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Demo {
    Hemisphere,
}

fn main() -> ExitCode {
    // clap's own usage exit code (2) is reserved for divergence here
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_FAILURE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Marks any failure to obtain a usable run config.
#[derive(Debug)]
struct ConfigFailure;

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("config error")
    }
}

impl std::error::Error for ConfigFailure {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigFailure>().is_some() {
        return EXIT_CONFIG;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(Error::Config { .. }) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { config, out_dir } => cmd_train(&config, out_dir),
        Command::Stats { c, d, trials, seed, p } => cmd_stats(c, d, trials, seed, p),
        Command::Render {
            demo,
            depth,
            albedo,
            pose,
            fov,
            radius,
            size,
            out_dir,
        } => match (demo, depth, albedo, pose) {
            (Some(Demo::Hemisphere), ..) => cmd_demo(size, &out_dir),
            (None, Some(depth), Some(albedo), Some(pose)) => cmd_render(&depth, &albedo, &pose, fov, radius, &out_dir),
            _ => bail!("render needs --demo hemisphere or all of --depth, --albedo and --pose"),
        },
        Command::GradCheck { seed, instances } => {
            let report = grad_check(seed, instances, 1e-4)?;
            print!("{}", report.render());
            if !report.passed() {
                bail!("gradient check failed");
            }
            Ok(())
        }
        Command::Hist {
            checkpoint,
            config,
            out_dir,
        } => cmd_hist(&checkpoint, config, out_dir),
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::from_file(path)
        .and_then(|cfg| cfg.validate().map(|_| cfg))
        .with_context(|| format!("reading {}", path.display()))
        .context(ConfigFailure)
}

fn cmd_train(config: &Path, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let dir = out_dir.unwrap_or_else(|| config.parent().unwrap_or(Path::new(".")).to_path_buf());
    let outcome = train(&cfg, Some(&dir))?;
    println!("accuracy {:.4}", outcome.final_accuracy);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_stats(c: usize, d: usize, trials: usize, seed: u64, p: f64) -> anyhow::Result<()> {
    let est = evt_estimate(c, d)?;
    let (half, quarter) = half_quarter_cosines(&est);
    let mc = monte_carlo_pairwise(c, d, trials, seed)?;
    let q_approx = min_quantile(p, c)?;
    let q_exact = min_quantile_exact(p, c)?;
    let rec: MetricRecord = [
        ("C", c as f64),
        ("d", d as f64),
        ("trials", trials as f64),
        ("seed", seed as f64),
        ("cos_min", est.cos_min),
        ("theta_min_deg", est.theta_min_deg),
        ("std_cos", est.std_cos),
        ("cos_half", half),
        ("cos_quarter", quarter),
        ("p", p),
        ("q_min_approx", q_approx),
        ("q_min_exact", q_exact),
        ("mc_max_cos_mean", mc.max_cos_mean),
        ("mc_global_max_cos_mean", mc.global_max_cos_mean),
        ("mc_std_cos", mc.std_cos_emp),
        ("mc_mean_cos", mc.mean_cos_emp),
        ("mc_max_cos_ratio", mc.max_cos_mean / est.cos_min),
        ("mc_std_ratio", mc.std_cos_emp / est.std_cos),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect::<IndexMap<_, _>>();
    print!("{}", metrics_to_string(&[rec])?);
    Ok(())
}

fn cmd_demo(size: usize, out_dir: &Path) -> anyhow::Result<()> {
    let frames = render_hemisphere_demo(size, [30.0, 30.0, 30.0], 3)?;
    let paths = write_demo_frames(&frames, out_dir)?;
    println!("wrote {} frames to {}", paths.len(), out_dir.display());
    Ok(())
}

fn read_depth(path: &Path) -> anyhow::Result<DepthMap> {
    let values = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let r = read_pgm(path)?;
            Array2::from_shape_vec((r.height, r.width), r.data)?
        }
        _ => {
            let t = read_tensor(path)?;
            if t.dims.len() != 2 {
                bail!("depth tensor must be 2-D, got dims {:?}", t.dims);
            }
            let data = t.data.iter().map(|&v| v as f64).collect();
            Array2::from_shape_vec((t.dims[0], t.dims[1]), data)?
        }
    };
    let valid = values.mapv(|v| v.is_finite() && v > 0.0);
    let values = values.mapv(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 });
    Ok(DepthMap::masked(values, valid)?)
}

fn cmd_render(
    depth: &Path,
    albedo: &Path,
    pose: &[f64],
    fov: f64,
    radius: usize,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let depth = read_depth(depth)?;
    let image = RgbImage::from_raster(&read_ppm(albedo)?)?;
    if (image.height(), image.width()) != (depth.height(), depth.width()) {
        bail!(
            "albedo is {}x{} but depth is {}x{}",
            image.height(),
            image.width(),
            depth.height(),
            depth.width()
        );
    }
    let k = intrinsics_from_fov(depth.width(), depth.height(), fov)?;
    let pivot = scene_pivot(&depth, &k).ok_or(Error::Mask)?;
    let pose = Pose::from_slice(pose, pivot)?;
    let canvas = make_canvas(std::slice::from_ref(&depth), &[pose], &k, radius)?;
    let out = warp_image(&image, &depth, &pose, &k, &canvas, radius)?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_ppm(&out.image.to_raster(), out_dir.join("frame.ppm"))?;
    let d = out.depth.values();
    write_pgm(
        &Raster::new(d.nrows(), d.ncols(), 1, d.iter().copied().collect())?,
        out_dir.join("depth.pgm"),
    )?;
    println!(
        "rendered {} of {} pixels into {}",
        out.mask.iter().filter(|&&m| m).count(),
        out.mask.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_hist(checkpoint: &Path, config: Option<PathBuf>, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    // checkpoints live in <run>/checkpoints/
    let run_dir = checkpoint
        .parent()
        .and_then(Path::parent)
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let config = config.unwrap_or_else(|| run_dir.join("config.txt"));
    let cfg = load_config(&config)?;
    let state = load_checkpoint(checkpoint, &cfg)?;
    let dataset = build_dataset(&cfg)?;
    let hist = histogram_dump(&state, &dataset);
    let dir = out_dir.unwrap_or(run_dir);
    hist.write(&dir)?;
    println!(
        "pad mean {:.4} std {:.4}, nad mean {:.4} std {:.4}",
        hist.pad_mean, hist.pad_std, hist.nad_mean, hist.nad_std
    );
    Ok(())
}
