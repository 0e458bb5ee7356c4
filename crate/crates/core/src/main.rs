use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmdenoise::config::ExperimentConfig;
use mmdenoise::experiment;
use mmdenoise::Error;

/// Hierarchical multimodal noise removal: training, evaluation and ablations.
#[derive(Parser)]
#[command(name = "mmdenoise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write checkpoints and histories.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Evaluate checkpoints with and without test-time enhancement.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        /// Use this checkpoint for every seed instead of `<out_dir>/seed_<s>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the four-row ablation grid under both noise protocols.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Write clean and corrupted splits as CSV files.
    Noise {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Collect existing summaries into `report.md`.
    Report {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> mmdenoise::Result<()> {
    let load = |p: &PathBuf| ExperimentConfig::load(p);
    match cli.command {
        Command::Train { config } => {
            for p in experiment::cmd_train(&load(&config)?)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { config, checkpoint } => {
            let s = experiment::cmd_eval(&load(&config)?, checkpoint.as_deref())?;
            print!("{}", s.markdown);
        }
        Command::Ablate { config } => {
            let cfg = load(&config)?;
            experiment::cmd_ablate(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("ablation.md"))?);
        }
        Command::Noise { config } => {
            for d in experiment::cmd_noise(&load(&config)?)? {
                println!("{}", d.display());
            }
        }
        Command::Report { config } => print!("{}", experiment::cmd_report(&load(&config)?)?),
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::InvalidArgument { .. } | Error::Csv { .. } => ExitCode::from(2),
                e if e.is_numerical() => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
