//! Command-line front end: reproducible runs over the `lqf` library.
//!
//! `lqf <command> [--config FILE] [--set key=value]... [--out DIR] [--seed N]`

pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;
pub mod setup;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lqf::{ErrorKind, LqfError};

pub use commands::{execute, Command, Outcome};
pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "lqf", version, about = "Linear-quadratic fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Key-value config document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "lqf-out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Iterative training of the linearized problem.
    Train,
    /// Closed-form solution.
    Solve,
    /// Hessian and preconditioned spectra.
    Spectrum,
    /// Leave-one-out influence, exact and K-FAC.
    Influence,
    /// Per-sample functional sample information.
    Fsi,
    /// Drop the most or least informative samples and re-solve.
    Summarize,
    /// Warm-started weight-decay path and validation gradients.
    LambdaPath,
    /// Few-shot comparison against nonlinear fine-tuning.
    Kshot,
    /// Incremental training over a growing dataset.
    Online,
    /// Oracle verification suite.
    Verify,
}

impl Sub {
    fn command(&self) -> Command {
        match self {
            Sub::Train => Command::Train,
            Sub::Solve => Command::Solve,
            Sub::Spectrum => Command::Spectrum,
            Sub::Influence => Command::Influence,
            Sub::Fsi => Command::Fsi,
            Sub::Summarize => Command::Summarize,
            Sub::LambdaPath => Command::LambdaPath,
            Sub::Kshot => Command::Kshot,
            Sub::Online => Command::Online,
            Sub::Verify => Command::Verify,
        }
    }
}

pub fn exit_code(err: &LqfError) -> i32 {
    match err.kind() {
        ErrorKind::Contract => 1,
        ErrorKind::Numeric => 2,
        ErrorKind::Io => 3,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = (|| {
        let mut cfg = match &cli.config {
            Some(path) => {
                if !path.exists() {
                    return Err(LqfError::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("config file {} not found", path.display()),
                    )));
                }
                Config::load(path)?
            }
            None => Config::default(),
        };
        for s in &cli.set {
            cfg.set(s)?;
        }
        if let Some(seed) = cli.seed {
            cfg.set(&format!("seed={seed}"))?;
        }
        execute(cli.command.command(), &cfg, &cli.out)
    })();
    match result {
        Ok(outcome) if outcome.failures > 0 => {
            eprintln!("lqf: {} check(s) failed; see {}", outcome.failures, cli.out.join("metrics.jsonl").display());
            2
        }
        Ok(_) => 0,
        Err(e) => {
            eprintln!("lqf: {e}");
            exit_code(&e)
        }
    }
}
