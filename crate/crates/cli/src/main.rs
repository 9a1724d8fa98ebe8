//! `altprint`: synthesis, feature extraction, training, evaluation,
//! localization and GAN runs from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "altprint", version, about = "Altered fingerprint detection and localization")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (falls back to the config file, then ALTPRINT_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 guarantees bit-identical results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic valid/altered dataset with masks and a manifest.
    Synth(SynthArgs),
    /// Export minutiae and quality scores of images.
    Features(FeaturesArgs),
    /// Train one detector, optionally holding out a fold.
    TrainDetector(TrainDetectorArgs),
    /// K-fold detector evaluation with ROC, EER and histogram outputs.
    Eval(EvalArgs),
    /// Build the minutia patch corpus and run the two-fold patch classifier.
    TrainLocalizer(TrainLocalizerArgs),
    /// Render a red/green alteration overlay for one image.
    Localize(LocalizeArgs),
    /// Train the GAN on the altered prints of a dataset.
    TrainGan(TrainGanArgs),
    /// Draw samples from a trained GAN.
    GanSample(GanSampleArgs),
    /// Compare quality distributions of generated, altered and valid prints.
    QualityReport(QualityReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_valid: Option<usize>,
    #[arg(long)]
    pub n_altered: Option<usize>,
    /// Square canvas side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Images to process (PGM or PNG).
    #[arg(long, required = true, num_args = 1..)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold to hold out (uses the experiment's fold split); trains on all
    /// entries when omitted.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainLocalizerArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Also write the patch corpus (PGMs plus JSON index).
    #[arg(long)]
    pub save_patches: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Patch classifier weights (with its `.json` sidecar).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Overlay PNG path; per-patch scores go to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Output side in pixels (32, 64, 128 or 256).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GanSampleArgs {
    /// Directory written by `train-gan`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QualityReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// GAN directory; its samples form the synthetic set.
    #[arg(long)]
    pub gan: Option<PathBuf>,
    /// Number of GAN samples.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failures caused by the invocation itself rather than the run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp_secs().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = RunConfig::load(cli.global.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    let seed = cfg.resolve_seed(cli.global.seed).map_err(|e| UsageError(format!("{e:#}")))?;
    match seed {
        Some(s) => log::info!("seed {s}"),
        None => log::info!("seed: component defaults (no global seed given)"),
    }
    commands::dispatch(cli.command, cfg)
}
