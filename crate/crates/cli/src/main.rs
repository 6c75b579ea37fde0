//! Command-line experiment runner.

mod commands;
mod config;
mod error;
mod output;
mod selfcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nlfrac::recovery::RecoveryMode;

use crate::config::Config;
use crate::error::CliError;
use crate::output::Output;

#[derive(Parser, Debug)]
#[command(name = "nlfrac", version, about = "Forward, linearization and recovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// RNG seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the nonlinear exterior problem for the configured data.
    Forward,
    /// Linearization cascade and its finite-difference check.
    Linearize,
    /// Remainder of the truncated expansion along a data sweep.
    Remainder,
    /// DN pairings over exterior bump bases.
    SynthesizeDn,
    /// Regularization path of the exterior control problem.
    RungeSweep,
    /// Recover the potential and the nonlinearity.
    Recover {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Invariant suite on a small grid.
    Selfcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Oracle,
    Exterior,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Linearize => "linearize",
            Command::Remainder => "remainder",
            Command::SynthesizeDn => "synthesize-dn",
            Command::RungeSweep => "runge-sweep",
            Command::Recover { .. } => "recover",
            Command::Selfcheck => "selfcheck",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out {
        cfg.output.dir = dir;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut out = Output::new(&cfg.output.dir, cli.command.name(), cfg.hash()?, cfg.seed)?;
    match cli.command {
        Command::Forward => commands::forward(&cfg, &mut out)?,
        Command::Linearize => commands::linearize(&cfg, &mut out)?,
        Command::Remainder => commands::remainder(&cfg, &mut out)?,
        Command::SynthesizeDn => commands::synthesize_dn(&cfg, &mut out)?,
        Command::RungeSweep => commands::runge_sweep(&cfg, &mut out)?,
        Command::Recover { mode } => {
            let mode = mode.map(|m| match m {
                ModeArg::Oracle => RecoveryMode::Oracle,
                ModeArg::Exterior => RecoveryMode::Exterior,
            });
            commands::recover(&cfg, mode, &mut out)?
        }
        Command::Selfcheck => {
            if !selfcheck::selfcheck(&cfg, &mut out)? {
                return Err(CliError::Check("selfcheck failed".into()));
            }
        }
    }
    log::info!("wrote {} files to {}", out.written().len(), cfg.output.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
