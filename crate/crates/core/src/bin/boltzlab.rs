use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use boltzlab::cli::{self, CliError};
use boltzlab::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "boltzlab",
    about = "Normalizing-flow generators for Boltzmann densities: data generation, training, evaluation, and pitfall demos",
    version
)]
struct Cli {
    /// Experiment configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output_dir from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print progress (with wall-clock timings) to stderr.
    #[arg(long, global = true)]
    progress: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate reference data with parallel-tempered Metropolis-Hastings.
    SampleData,
    /// Pre-train a fresh model on the dataset with the klz loss.
    Pretrain,
    /// Fine-tune a checkpoint with the configured data-free loss.
    Finetune {
        /// Checkpoint produced by pretrain (or a previous finetune).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint: metrics record plus CSV histograms.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Emit CSV traces for the optimization-pitfall demonstrations.
    PitfallDemo {
        /// One of: flow-ode, naive-kl, normalized-kl, stabilizer.
        #[arg(long)]
        mode: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let out = PathBuf::from(&cfg.output_dir);
    match &cli.command {
        Command::SampleData => cli::cmd_sample_data(&cfg, &out),
        Command::Pretrain => cli::cmd_pretrain(&cfg, &out, cli.progress),
        Command::Finetune { checkpoint } => {
            cli::cmd_finetune(&cfg, &out, checkpoint, cli.progress)
        }
        Command::Eval { checkpoint } => cli::cmd_eval(&cfg, &out, checkpoint),
        Command::PitfallDemo { mode } => cli::cmd_pitfall_demo(&cfg, &out, mode),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
