use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use posbias::commands::{self, Context};
use posbias::Failure;
use posbias_core::debias::ModeSpec;

#[derive(Parser)]
#[command(name = "posbias", version, about = "Position-bias debiasing pipeline")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace outputs that are out of date.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ignore unknown keys in session logs.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the hotel universe and the training and held-out logs.
    Simulate,
    /// Estimate the examination propensity curve from the training log.
    Estimate,
    /// Build a training set for one sampling mode (default: all configured).
    Prepare {
        #[arg(long)]
        mode: Option<ModeSpec>,
    },
    /// Train a ranker for one sampling mode (default: all configured).
    Train {
        #[arg(long)]
        mode: Option<ModeSpec>,
    },
    /// Train hotel embeddings on click sequences.
    Embed,
    /// Score every model on the held-out log.
    Evaluate,
    /// Run the simulated A/B test between the trained models.
    Abtest,
    /// Write curve data for plotting.
    PlotData,
    /// Run every step in order.
    Pipeline,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::in_module("cli"))?;
    }
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    let mut ctx = Context::open(cfg, cli.out, cli.force, cli.lenient)?;
    match cli.command {
        Command::Simulate => commands::simulate(&mut ctx),
        Command::Estimate => commands::estimate(&mut ctx),
        Command::Prepare { mode } => commands::prepare(&mut ctx, mode),
        Command::Train { mode } => commands::train(&mut ctx, mode),
        Command::Embed => commands::embed(&mut ctx),
        Command::Evaluate => commands::evaluate(&mut ctx),
        Command::Abtest => commands::abtest(&mut ctx),
        Command::PlotData => commands::plot_data(&mut ctx),
        Command::Pipeline => commands::pipeline(&mut ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
