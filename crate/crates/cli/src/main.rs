//! `voxface`: staged pipeline from voice recordings to predicted AMs and
//! reconstructed face meshes.

mod artifacts;
mod config;
mod data;
mod error;
mod plot;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use voxface::dataset::Split;

use crate::artifacts::Ctx;
use crate::config::{Overrides, PipelineConfig};
use crate::error::Result;

#[derive(Parser)]
#[command(name = "voxface", version, about = "Voice to facial-geometry pipeline")]
struct Cli {
    /// TOML config file
    #[arg(long, global = true, env = "VOXFACE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "VOXFACE_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "VOXFACE_JOBS")]
    jobs: Option<usize>,
    /// Dataset directory
    #[arg(long, global = true, env = "VOXFACE_DATA")]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, env = "VOXFACE_OUT")]
    out: Option<PathBuf>,
    /// Train with the phonatory (diffusion) term
    #[arg(long, global = true, env = "VOXFACE_PHONATORY")]
    phonatory: Option<Toggle>,
    /// Weight of the phonatory term
    #[arg(long, global = true, env = "VOXFACE_GAMMA")]
    gamma: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted voice-face correlations
    Synth,
    /// Compute AMs from every speaker mesh
    ComputeAms,
    /// Build the PCA shape basis from training meshes
    BuildBasis,
    /// Train the AM estimator
    Train,
    /// Predict AMs and uncertainties for one split
    Predict {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the repeated predictability experiment and select AMs
    Select,
    /// Reconstruct meshes from predicted AMs
    Fit,
    /// Per-vertex errors and uncertainty-filtered error maps
    Evaluate,
    /// Assemble figures and the summary table
    Report,
    /// Run every stage in order
    All,
    /// Print the resolved configuration
    Config,
}

const ORDER: [&str; 9] = ["synth", "compute-ams", "build-basis", "train", "predict", "select", "fit", "evaluate", "report"];

fn run_stage(cfg: &PipelineConfig, stage: &str, split: Split) -> Result<()> {
    let mut ctx = Ctx::new(cfg.clone());
    log::info!("stage {stage}");
    match stage {
        "synth" => stages::synth(&mut ctx)?,
        "compute-ams" => stages::compute_ams(&mut ctx)?,
        "build-basis" => stages::build_basis_stage(&mut ctx)?,
        "train" => stages::train_stage(&mut ctx)?,
        "predict" => stages::predict(&mut ctx, split)?,
        "select" => stages::select(&mut ctx)?,
        "fit" => stages::fit(&mut ctx)?,
        "evaluate" => stages::evaluate(&mut ctx)?,
        "report" => stages::report(&mut ctx)?,
        _ => unreachable!("unknown stage {stage}"),
    }
    ctx.finish(stage)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        data_root: cli.data,
        out_dir: cli.out,
        phonatory: cli.phonatory.map(|t| matches!(t, Toggle::On)),
        gamma: cli.gamma,
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(jobs) = cli.jobs {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    match cli.command {
        Command::Config => {
            print!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml());
            Ok(())
        }
        Command::All => ORDER.iter().try_for_each(|s| run_stage(&cfg, s, Split::Test)),
        Command::Predict { split } => run_stage(&cfg, "predict", split.parse()?),
        Command::Synth => run_stage(&cfg, "synth", Split::Test),
        Command::ComputeAms => run_stage(&cfg, "compute-ams", Split::Test),
        Command::BuildBasis => run_stage(&cfg, "build-basis", Split::Test),
        Command::Train => run_stage(&cfg, "train", Split::Test),
        Command::Select => run_stage(&cfg, "select", Split::Test),
        Command::Fit => run_stage(&cfg, "fit", Split::Test),
        Command::Evaluate => run_stage(&cfg, "evaluate", Split::Test),
        Command::Report => run_stage(&cfg, "report", Split::Test),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOXFACE_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
