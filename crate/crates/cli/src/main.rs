//! `ctsr`: run the super-resolution pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctsr_cli::config::RunConfig;
use ctsr_cli::is_validation;
use ctsr_cli::pipeline::{self, Workspace};

#[derive(Parser)]
#[command(name = "ctsr", version, about = "Zero-shot CT super-resolution pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the sampler and trainer seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the ground-truth volume (phantom or clipped input volume).
    Phantom,
    /// Blur and downsample the ground truth.
    Degrade,
    /// Project the ground truth and the cubic-upsampled LR volume.
    Project,
    /// Upsample the binned projections with the diffusion sampler.
    Sr2d,
    /// Fit the residual Gaussian field and write the final volume.
    Reconstruct,
    /// Score trilinear, cubic and the reconstruction against the ground truth.
    Evaluate,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_overrides(cli.seed, cli.out);
    cfg.validate()?;
    let ws = Workspace::new(cfg)?;
    match cli.command {
        Command::Phantom => pipeline::phantom(&ws),
        Command::Degrade => pipeline::degrade_cmd(&ws),
        Command::Project => pipeline::project(&ws),
        Command::Sr2d => pipeline::sr2d(&ws),
        Command::Reconstruct => pipeline::reconstruct(&ws),
        Command::Evaluate => {
            let eval = pipeline::evaluate(&ws)?;
            print!("{}", eval.table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
