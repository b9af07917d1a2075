use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod errors;
mod rundir;
mod stages;
mod sweep;

use errors::{exit_code, UsageError};
use stages::Stage;
use sweep::SweepParam;

#[derive(Parser)]
#[command(name = "glimpse", version, about = "Evidence-chain search and policy learning experiments")]
struct Cli {
    /// Worker threads for episode-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, RL-pool and eval corpora.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one pipeline stage (or all of them) in a run directory.
    Run {
        #[arg(value_enum)]
        stage: StageArg,
        /// Required for gen-data and all; later stages default to the run
        /// directory's config.toml.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full pipeline per (value, seed) and write a results table.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    GenData,
    Search,
    Sft,
    Grpo,
    Eval,
    All,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(UsageError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen { config, out, seed } => stages::run_stage(Stage::GenData, Some(&config), &out, seed),
        Command::Run { stage, config, out, seed } => {
            let list: &[Stage] = match stage {
                StageArg::GenData => &[Stage::GenData],
                StageArg::Search => &[Stage::Search],
                StageArg::Sft => &[Stage::Sft],
                StageArg::Grpo => &[Stage::Grpo],
                StageArg::Eval => &[Stage::Eval],
                StageArg::All => &Stage::ALL,
            };
            for &s in list {
                let cfg = if s == Stage::GenData || config.is_some() { config.as_deref() } else { None };
                stages::run_stage(s, cfg, &out, seed)?;
            }
            Ok(())
        }
        Command::Sweep { param, values, seeds, config, out } => sweep::run_sweep(param, &values, &seeds, &config, &out),
        Command::Config => {
            print!("{}", glimpse_core::experiment::ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
