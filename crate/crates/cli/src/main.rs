use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swax_core::io::{load_experiment, load_sweep, run_eval, run_experiment, run_sweep};
use swax_core::Error;

#[derive(Parser)]
#[command(
    name = "swax",
    version,
    about = "Train and evaluate sliding-window / linear-attention hybrids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
    /// Replaces the master seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and evaluate the final model.
    Train(Common),
    /// Evaluate a checkpoint on the experiment's grid.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (holding manifest.txt and tensors.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        /// SWA window used at test time; repeat for several.
        #[arg(long = "test-window")]
        test_windows: Vec<usize>,
    },
    /// Train and evaluate every cell of a grid.
    Sweep(Common),
}

enum Failure {
    Validation(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) => Failure::Validation(e),
            e => Failure::Runtime(e),
        }
    }
}

fn read_config<T>(path: &Path, load: impl Fn(&Path) -> swax_core::Result<T>) -> Result<T, Failure> {
    load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Validation(e),
        e => Failure::from(e),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(c) => {
            let mut exp = read_config(&c.config, load_experiment)?;
            if let Some(s) = c.seed {
                exp.train.seed = s;
            }
            let run = run_experiment(&exp, &c.out)?;
            println!("run written to {}", run.root().display());
        }
        Command::Eval {
            common: c,
            checkpoint,
            test_windows,
        } => {
            if let Some(w) = test_windows.iter().find(|&&w| w == 0) {
                return Err(Failure::Validation(Error::Config(format!(
                    "--test-window must be positive, got {w}"
                ))));
            }
            let mut exp = read_config(&c.config, load_experiment)?;
            if let Some(s) = c.seed {
                exp.train.seed = s;
            }
            let rows = run_eval(&checkpoint, &exp, &test_windows, &c.out)?;
            println!("{} result rows written to {}", rows.len(), c.out.display());
        }
        Command::Sweep(c) => {
            let mut sweep = read_config(&c.config, load_sweep)?;
            if let Some(s) = c.seed {
                sweep.base.train.seed = s;
            }
            let outcome = run_sweep(&sweep, &c.out)?;
            println!("{} result rows written to {}", outcome.rows.len(), c.out.display());
            if !outcome.failures.is_empty() {
                for (i, tag, e) in &outcome.failures {
                    eprintln!("cell {i} ({tag}) failed: {e}");
                }
                return Err(Failure::Runtime(Error::Config(format!(
                    "{} of {} cells failed",
                    outcome.failures.len(),
                    sweep.cells.len()
                ))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
