//! `glacio`: dataset preparation, synthesis, training, evaluation, inference,
//! ice-on/off series and figures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod plot;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "glacio", version, about = "Lake-ice monitoring from webcam imagery")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.base_lr=0.01`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores). `--jobs 1` is fully deterministic.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize LabelMe annotations into masks and a dataset index.
    Ingest(IngestArgs),
    /// Generate synthetic scenes or a synthetic freeze season.
    Synth(SynthArgs),
    /// Train a network on an indexed dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-class IoU, mIoU and PR curves.
    Eval(EvalArgs),
    /// Run lake detection and ice segmentation on frames or crowd images.
    Infer(InferArgs),
    /// Build the frozen-area series and ice-on/off dates.
    Series(SeriesArgs),
    /// Render a figure with a CSV data sidecar.
    Plot(PlotArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Directory of LabelMe `.json` documents.
    #[arg(long)]
    annotations: PathBuf,
    /// Output directory for `masks/`, `index.csv` and `class_frequencies.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "unknown")]
    camera_id: String,
    #[arg(long, default_value = "unknown")]
    lake_id: String,
    #[arg(long, default_value = "unknown")]
    winter_id: String,
    #[arg(long, value_enum, default_value_t = SourceArg::Webcam)]
    source: SourceArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Webcam,
    Crowd,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    /// Output directory (default: `<paths.out_dir>/synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of scenes (`synth.n_scenes`).
    #[arg(long)]
    n: Option<usize>,
    /// Scene size in pixels (`synth.size`).
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    /// Independent labeled scenes.
    Scenes,
    /// One camera over a winter with planted freeze events.
    Season,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Split mode (`split.mode`).
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Training selector: camera id, or winter id for `cross_winter`.
    #[arg(long = "train")]
    train_sel: Option<String>,
    /// Test selector: camera id, or winter id for `cross_winter`.
    #[arg(long = "test")]
    test_sel: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SplitArg {
    SameCamera,
    CrossCamera,
    CrossWinter,
    /// Use every frame of the index.
    None,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset index (`paths.index`).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Run directory (default: `<paths.out_dir>/train`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate (`paths.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset index (`paths.index`).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Report directory (default: `<paths.out_dir>/eval`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Webcam index to monitor.
    #[arg(long, conflicts_with = "images")]
    index: Option<PathBuf>,
    /// Crowd-sourced images, processed at `pipeline.crowd_resize`.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Output directory (`pipeline.output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `iso` or `paper` dates (`output.date_format`).
    #[arg(long)]
    date_format: Option<String>,
}

#[derive(Args, Debug)]
struct SeriesArgs {
    /// CSV with `timestamp` and `frozen_fraction` columns (e.g. `frames.csv`).
    #[arg(long, conflicts_with_all = ["index", "lake_mask"])]
    fractions: Option<PathBuf>,
    /// Dataset index whose ground-truth masks are used.
    #[arg(long, requires = "lake_mask")]
    index: Option<PathBuf>,
    /// Lake region mask in the lake-detection palette.
    #[arg(long)]
    lake_mask: Option<PathBuf>,
    /// Output directory (default: `<paths.out_dir>/series`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `iso` or `paper` dates (`output.date_format`).
    #[arg(long)]
    date_format: Option<String>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(value_enum)]
    artifact: plot::Artifact,
    /// Input CSV (`pr.csv`, `class_frequencies.csv` or `series.csv`).
    #[arg(long)]
    input: PathBuf,
    /// Output PNG; the data sidecar goes next to it as `.csv`, the manifest as `.json`.
    #[arg(long)]
    out: PathBuf,
}

/// An error with its process exit code: 1 for runtime failures, 2 for
/// configuration and validation problems.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<glacio::Error> for CliError {
    fn from(e: glacio::Error) -> Self {
        use glacio::Error as E;
        match e {
            E::Diverged { .. } | E::NonFiniteGradient { .. } | E::NoFrames | E::State(_) | E::Io { .. } | E::Image(_) => {
                CliError::runtime(e.to_string())
            }
            _ => CliError::config(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let seed_env = std::env::var("GLACIO_SEED").ok();
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, seed_env.as_deref())?;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&cfg, a),
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Infer(a) => commands::infer(cfg, a),
        Command::Series(a) => commands::series(cfg, a),
        Command::Plot(a) => plot::run(&a.artifact, &a.input, &a.out),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
