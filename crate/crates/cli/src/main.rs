use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use decopt_cli::commands;
use decopt_cli::config::Config;

#[derive(Parser)]
#[command(name = "decopt", version, about = "Decentralized optimization with a learned per-round parameter policy")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, default_value = "decopt.toml")]
    config: PathBuf,

    /// Master seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the graph and labeled train/val/test instances.
    Gen,
    /// Pretrain and train the policy; writes checkpoint and curves.
    Train,
    /// Evaluate a checkpoint deterministically on the test split.
    Eval {
        /// Checkpoint file (defaults to the one in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rounds to roll out; may exceed the training horizon.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run learned, tuned-constant, and consensus methods into one CSV.
    Compare {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Re-certify every stored optimum in the manifest.
    OracleCheck,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = Config::load(&cli.config)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Gen => {
            commands::gen(&config, cli.seed, out)?;
        }
        Command::Train => {
            commands::train(&config, cli.seed, out)?;
        }
        Command::Eval { checkpoint, rounds } => {
            commands::eval(&config, checkpoint.as_deref(), rounds, cli.seed, out)?;
        }
        Command::Compare { checkpoint, rounds } => {
            commands::compare(&config, checkpoint.as_deref(), rounds, cli.seed, out)?;
        }
        Command::OracleCheck => {
            commands::oracle_check(&config, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
