//! Command-line front end for the zero dynamics policy toolkit.
//!
//! Five workflows over a shared TOML configuration: `construct` runs the
//! linear synthesis stage and stores the certified subspace, `train` extends
//! it with a network fit against the invariance objective, `simulate` rolls
//! out a chosen controller, `roa` sweeps initial pendulum conditions, and
//! `verify` re-derives the certificates of a stored model.
//!
//! Exit codes: 2 for configuration, usage, and file-format problems, 3 for
//! numerical failures inside the toolkit, 4 when verification checks fail.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// Failures surfaced by the command implementations, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration.
    Config(String),
    /// A toolkit routine failed.
    Core(zdp_core::Error),
    /// Stored certificates did not re-verify.
    Verification { failures: usize },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Verification { failures } => {
                write!(f, "{failures} verification check(s) failed")
            }
        }
    }
}

impl From<zdp_core::Error> for CliError {
    fn from(e: zdp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                zdp_core::Error::BadPoles { .. }
                | zdp_core::Error::ModelFormat { .. }
                | zdp_core::Error::Io(_) => 2,
                _ => 3,
            },
            CliError::Verification { .. } => 4,
        }
    }
}

/// Feedback law selector shared by `simulate` and `roa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerChoice {
    /// Output tracking onto the trained network graph (needs a checkpoint).
    Zdp,
    /// Output tracking onto the linear-stage graph.
    ZdpLinear,
    /// Benchmark regulator from the origin linearization in native coordinates.
    Lqr,
}

impl ControllerChoice {
    pub fn name(self) -> &'static str {
        match self {
            ControllerChoice::Zdp => "zdp",
            ControllerChoice::ZdpLinear => "zdp-linear",
            ControllerChoice::Lqr => "lqr",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "zdp", version, about = "Zero dynamics policy toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the linear stage: pole placement, invariant subspace, certified output.
    Construct {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Where to write the construct model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the manifold network against the invariance objective.
    Train {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Construct model produced by `construct`.
        #[arg(long)]
        model: PathBuf,
        /// Where to write the checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV stream of per-step residual statistics.
        #[arg(long)]
        loss_out: Option<PathBuf>,
        /// RNG seed; identical seeds give byte-identical checkpoints.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads for the per-batch input queries (0 uses all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Roll out a controller and write the trajectory as CSV.
    Simulate {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Construct model or checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Feedback law to close the loop with.
        #[arg(long, value_enum)]
        controller: ControllerChoice,
        /// Where to write the trajectory CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a grid of initial pendulum conditions and write the cells as CSV.
    Roa {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Construct model or checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Feedback law to close the loop with.
        #[arg(long, value_enum)]
        controller: ControllerChoice,
        /// Where to write the sweep CSV.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for the sweep (0 uses all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Re-derive the certificates of a stored model and report each check.
    Verify {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Construct model or checkpoint.
        #[arg(long)]
        model: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Construct { config, out } => commands::construct(&config, &out),
        Command::Train {
            config,
            model,
            out,
            loss_out,
            seed,
            jobs,
        } => commands::train(&config, &model, &out, loss_out.as_deref(), seed, jobs),
        Command::Simulate {
            config,
            model,
            controller,
            out,
        } => commands::simulate(&config, &model, controller, &out),
        Command::Roa {
            config,
            model,
            controller,
            out,
            jobs,
        } => commands::roa(&config, &model, controller, &out, jobs),
        Command::Verify { config, model } => commands::verify(&config, &model),
    }
}
