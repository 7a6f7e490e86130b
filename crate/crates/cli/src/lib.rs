//! Command-line front end: haze synthesis, training-set construction,
//! training, dehazing and evaluation.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hazenet::haze::{synthesize_haze, transmittance_from_depth, Airlight, ScatteringCoefficient};
use hazenet::image::{psnr, read_gray, read_image, ssim, write_gray, write_image, Psnr};
use hazenet::interp::{InterpolationConfig, DEFAULT_CG_MAX_ITERS, DEFAULT_CG_TOL, DEFAULT_EPS_W, DEFAULT_LAMBDA};
use hazenet::nn::{load_model, save_model, train, NetworkParams, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
use hazenet::patch::{PatchSample, DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, DEFAULT_VARIANCE_THRESHOLD};
use hazenet::pipeline::{dehaze, DehazeConfig};
use hazenet::synth::{build_training_set, load_manifest, read_training_set, write_training_set, SynthConfig};
use log::info;

use crate::config::{ConfigFile, Rgb};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hazenet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use hazenet::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                E::Unreadable { .. }
                | E::Unwritable { .. }
                | E::UnsupportedFormat { .. }
                | E::CorruptFile { .. }
                | E::LayerMismatch { .. } => EXIT_IO,
                _ => EXIT_NUMERIC,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hazenet", version, about = "Single-image dehazing with a patch-wise CNN estimator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add synthetic haze to a clean image using its depth map
    Synth(SynthArgs),
    /// Cut labeled training patches from a depth dataset manifest
    BuildDataset(BuildDatasetArgs),
    /// Train the estimator and write a model file and loss log
    Train(TrainArgs),
    /// Remove haze from an image with a trained model
    Dehaze(DehazeArgs),
    /// Compare an image with its ground truth
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clean: PathBuf,
    /// Grayscale depth map, values read as [0, 1]
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth transmittance output; defaults to `<out>_tmap` beside the output
    #[arg(long)]
    pub tmap_out: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Airlight as r,g,b
    #[arg(long)]
    pub airlight: Option<Rgb>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct PatchArgs {
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct SynthParamArgs {
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub airlight_min: Option<f64>,
    #[arg(long)]
    pub airlight_max: Option<f64>,
    /// Largest tolerated fraction of missing-depth pixels per patch
    #[arg(long)]
    pub max_missing_depth: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[command(flatten)]
    pub synth: SynthParamArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Depth dataset manifest to build patches from
    #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
    pub manifest: Option<PathBuf>,
    /// Prebuilt training set from `build-dataset`
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Defaults to `<model-out>.loss.csv`
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[command(flatten)]
    pub synth: SynthParamArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the interpolated transmittance map as `<out>_tmap`
    #[arg(long)]
    pub emit_tmap: bool,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps_w: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iters: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dehazed: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Append a `psnr=<v> ssim=<v>` line
    #[arg(long)]
    pub machine: bool,
}

pub fn run(cli: Cli, out: &mut impl Write) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::BuildDataset(a) => cmd_build_dataset(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Dehaze(a) => cmd_dehaze(&a),
        Command::Eval(a) => cmd_eval(&a, out),
    }
}

/// `<dir>/<stem>_tmap.<ext>` with a grayscale extension matching `image_path`.
pub fn tmap_path(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    let ext = match image_path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => "pgm",
        _ => "png",
    };
    image_path.with_file_name(format!("{stem}_tmap.{ext}"))
}

fn require_existing(paths: &[&Path]) -> CliResult<()> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::Core(hazenet::Error::Unreadable {
                path: p.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            }));
        }
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    require_existing(&[&a.clean, &a.depth])?;
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let beta = ScatteringCoefficient::new(cfg.resolve(a.beta, "beta", 1.0)?)?;
    let airlight = Airlight::new(cfg.resolve(a.airlight, "airlight", Rgb([1.0; 3]))?.0)?;
    let clean = read_image(&a.clean)?;
    let depth = read_gray(&a.depth)?;
    let t = transmittance_from_depth(&depth, beta)?;
    let hazy = synthesize_haze(&clean, &t, airlight)?;
    write_image(&hazy, &a.out)?;
    let tmap = a.tmap_out.clone().unwrap_or_else(|| tmap_path(&a.out));
    write_gray(t.as_map(), &tmap)?;
    info!("wrote {} and {}", a.out.display(), tmap.display());
    Ok(())
}

fn synth_config(patch: &PatchArgs, synth: &SynthParamArgs, cfg: &ConfigFile) -> CliResult<SynthConfig> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        beta_range: (
            cfg.resolve(synth.beta_min, "beta-min", d.beta_range.0)?,
            cfg.resolve(synth.beta_max, "beta-max", d.beta_range.1)?,
        ),
        airlight_range: (
            cfg.resolve(synth.airlight_min, "airlight-min", d.airlight_range.0)?,
            cfg.resolve(synth.airlight_max, "airlight-max", d.airlight_range.1)?,
        ),
        patch_size: cfg.resolve(patch.patch_size, "patch-size", DEFAULT_PATCH_SIZE)?,
        stride: cfg.resolve(patch.stride, "stride", DEFAULT_STRIDE)?,
        variance_threshold: cfg.resolve(patch.variance_threshold, "variance-threshold", DEFAULT_VARIANCE_THRESHOLD)?,
        max_missing_depth_fraction: cfg.resolve(synth.max_missing_depth, "max-missing-depth", d.max_missing_depth_fraction)?,
        seed: cfg.resolve(synth.seed, "seed", 0)?,
    };
    config.validate()?;
    Ok(config)
}

fn patches_from_manifest(manifest: &Path, config: &SynthConfig) -> CliResult<Vec<PatchSample>> {
    let dataset = load_manifest(manifest)?;
    let (patches, stats) = build_training_set(&dataset, config)?;
    info!(
        "{} items: {} patches extracted, {} smooth, {} missing depth, {} kept",
        dataset.items.len(),
        stats.extracted,
        stats.smooth,
        stats.missing_depth,
        stats.kept
    );
    if patches.is_empty() {
        return Err(CliError::Core(hazenet::Error::Empty(format!(
            "no training patches survive filtering ({} extracted, {} smooth, {} missing depth)",
            stats.extracted, stats.smooth, stats.missing_depth
        ))));
    }
    Ok(patches)
}

pub fn cmd_build_dataset(a: &BuildDatasetArgs) -> CliResult<()> {
    require_existing(&[&a.manifest])?;
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let config = synth_config(&a.patch, &a.synth, &cfg)?;
    let patches = patches_from_manifest(&a.manifest, &config)?;
    write_training_set(&patches, &a.out)?;
    info!("wrote {} patches to {}", patches.len(), a.out.display());
    Ok(())
}

pub fn loss_log_path(model_out: &Path) -> PathBuf {
    let mut name = model_out.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

/// Trains and writes the model and loss log; returns the per-epoch losses.
pub fn cmd_train(a: &TrainArgs) -> CliResult<Vec<f64>> {
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let synth = synth_config(&a.patch, &a.synth, &cfg)?;
    let patches = match (&a.manifest, &a.dataset) {
        (Some(m), _) => {
            require_existing(&[m])?;
            patches_from_manifest(m, &synth)?
        }
        (None, Some(d)) => {
            require_existing(&[d])?;
            read_training_set(d)?
        }
        (None, None) => return Err(CliError::Usage("one of --manifest or --dataset is required".into())),
    };
    let config = TrainConfig {
        epochs: cfg.resolve(a.epochs, "epochs", DEFAULT_EPOCHS)?,
        batch_size: cfg.resolve(a.batch_size, "batch-size", DEFAULT_BATCH_SIZE)?,
        seed: synth.seed,
        ..TrainConfig::default()
    };
    let mut params = NetworkParams::init(config.seed);
    let report = train(&mut params, &patches, &config)?;
    save_model(&params, &a.model_out)?;
    let log_path = a.loss_log.clone().unwrap_or_else(|| loss_log_path(&a.model_out));
    let log: String = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{},{l}\n", e + 1))
        .collect();
    fs::write(&log_path, log).map_err(|source| hazenet::Error::Unwritable {
        path: log_path.clone(),
        source,
    })?;
    info!("wrote {} and {}", a.model_out.display(), log_path.display());
    Ok(report.epoch_losses)
}

pub fn cmd_dehaze(a: &DehazeArgs) -> CliResult<()> {
    require_existing(&[&a.input, &a.model])?;
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let config = DehazeConfig {
        patch_size: cfg.resolve(a.patch.patch_size, "patch-size", DEFAULT_PATCH_SIZE)?,
        stride: cfg.resolve(a.patch.stride, "stride", DEFAULT_STRIDE)?,
        variance_threshold: cfg.resolve(a.patch.variance_threshold, "variance-threshold", DEFAULT_VARIANCE_THRESHOLD)?,
        interpolation: InterpolationConfig {
            lambda: cfg.resolve(a.lambda, "lambda", DEFAULT_LAMBDA)?,
            eps_w: cfg.resolve(a.eps_w, "eps-w", DEFAULT_EPS_W)?,
            cg_tol: cfg.resolve(a.cg_tol, "cg-tol", DEFAULT_CG_TOL)?,
            cg_max_iters: cfg.resolve(a.cg_max_iters, "cg-max-iters", DEFAULT_CG_MAX_ITERS)?,
        },
    };
    let params = load_model(&a.model)?;
    let hazy = read_image(&a.input)?;
    let result = dehaze(&hazy, &params, &config)?;
    info!("airlight estimate {:?} from {} patches", result.airlight.rgb(), result.patches_used);
    write_image(&result.radiance, &a.out)?;
    if a.emit_tmap {
        write_gray(result.transmittance.as_map(), tmap_path(&a.out))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: Psnr,
    pub ssim: f64,
}

impl Metrics {
    pub fn machine_line(&self) -> String {
        format!("psnr={} ssim={}", self.psnr, self.ssim)
    }

    pub fn parse_machine_line(line: &str) -> Option<Metrics> {
        let mut psnr = None;
        let mut ssim = None;
        for field in line.split_whitespace() {
            match field.split_once('=')? {
                ("psnr", "inf") => psnr = Some(Psnr::Infinite),
                ("psnr", v) => psnr = Some(Psnr::Finite(v.parse().ok()?)),
                ("ssim", v) => ssim = Some(v.parse().ok()?),
                _ => return None,
            }
        }
        Some(Metrics { psnr: psnr?, ssim: ssim? })
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> CliResult<()> {
    require_existing(&[&a.dehazed, &a.reference])?;
    let test = read_image(&a.dehazed)?;
    let reference = read_image(&a.reference)?;
    let m = Metrics {
        psnr: psnr(&reference, &test)?,
        ssim: ssim(&reference, &test)?,
    };
    let stdout_err = |source| hazenet::Error::Unwritable {
        path: PathBuf::from("<stdout>"),
        source,
    };
    writeln!(out, "PSNR: {} dB\nSSIM: {}", m.psnr, m.ssim).map_err(stdout_err)?;
    if a.machine {
        writeln!(out, "{}", m.machine_line()).map_err(stdout_err)?;
    }
    Ok(())
}
