//! Command-line front end: scenario configs in, CSV tables and reports out.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod export;
pub mod expr;
pub mod scenario;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{Outcome, SweepAxis};
use crate::config::{parse_scenario, ConfigError, ScenarioConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "slide", version, about = "Sliding-mode reaching-time experiments")]
pub struct Cli {
    /// Master seed, overriding `mc.master_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding `output.directory`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to SLIDE_THREADS, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the sliding hypotheses on the configured box.
    Certify {
        config: PathBuf,
        /// Exit 1 when violations are found.
        #[arg(long)]
        strict: bool,
    },
    /// Write sample trajectories.
    Simulate { config: PathBuf },
    /// Compare the empirical reaching-time tail with the theoretical bound.
    VerifyBound {
        config: PathBuf,
        /// Require the upper confidence limit itself to lie below the bound.
        #[arg(long)]
        strict: bool,
        /// Run even when certification reports violations.
        #[arg(long = "override")]
        override_cert: bool,
    },
    /// Repeat the bound check along one numerical axis.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        strict: bool,
        #[arg(long = "override")]
        override_cert: bool,
    },
    /// Simulate a heat-equation scenario and write its energy series.
    Spde { config: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Axis {
    Eps,
    Dt,
    #[value(name = "n_modes", alias = "n-modes")]
    NModes,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Eps => SweepAxis::Eps,
            Axis::Dt => SweepAxis::Dt,
            Axis::NModes => SweepAxis::NModes,
        }
    }
}

impl Command {
    fn config_path(&self) -> &PathBuf {
        match self {
            Command::Certify { config, .. }
            | Command::Simulate { config }
            | Command::VerifyBound { config, .. }
            | Command::Sweep { config, .. }
            | Command::Spde { config } => config,
        }
    }
}

fn thread_count(cli: &Cli) -> Result<Option<usize>, ConfigError> {
    if let Some(n) = cli.threads {
        return match n {
            0 => Err(ConfigError::invalid("--threads", "must be at least 1")),
            n => Ok(Some(n)),
        };
    }
    match std::env::var("SLIDE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ConfigError::invalid(
                "SLIDE_THREADS",
                format!("`{v}` is not a positive integer"),
            )),
        },
        Err(_) => Ok(None),
    }
}

fn load(cli: &Cli) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = parse_scenario(cli.command.config_path())?;
    if let Some(seed) = cli.seed {
        cfg.mc.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &ScenarioConfig) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Certify { strict, .. } => commands::cmd_certify(cfg, *strict),
        Command::Simulate { .. } => commands::cmd_simulate(cfg),
        Command::VerifyBound {
            strict,
            override_cert,
            ..
        } => commands::cmd_verify_bound(cfg, *strict, *override_cert),
        Command::Sweep {
            axis,
            values,
            strict,
            override_cert,
            ..
        } => commands::cmd_sweep(cfg, (*axis).into(), values, *strict, *override_cert),
        Command::Spde { .. } => commands::cmd_spde(cfg),
    }
}

/// Exit code for an error: configuration and usage problems give 2,
/// everything raised by the engines during a run gives 3.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<slide_core::Error>() {
            return match core {
                slide_core::Error::InvalidParameter { .. } | slide_core::Error::Shape(_) => EXIT_USAGE,
                _ => EXIT_NUMERIC,
            };
        }
    }
    EXIT_NUMERIC
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = thread_count(&cli)
        .map_err(anyhow::Error::from)
        .and_then(|threads| {
            let cfg = load(&cli)?;
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = threads {
                pool = pool.num_threads(n);
            }
            let pool = pool.build()?;
            pool.install(|| dispatch(&cli, &cfg))
        });
    match result {
        Ok(Outcome::Pass) => EXIT_PASS,
        Ok(Outcome::Fail) => EXIT_FAIL,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs them.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_PASS
            }
        }
    }
}
