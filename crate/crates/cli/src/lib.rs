//! The `dampc` command line: data collection, training, closed-loop
//! evaluation, ablations, gradient checks and trajectory heatmaps, all driven
//! by one JSON config and a seed.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "DAMPC_THREADS";

/// A failed command: exit code 2 for usage and configuration problems, 1
/// for everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<dampc_core::Error> for Failure {
    fn from(e: dampc_core::Error) -> Self {
        use dampc_core::Error as E;
        match e {
            E::Config(_) | E::Dimension { .. } | E::Format { .. } => Failure::usage(e.to_string()),
            _ => Failure::internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dampc",
    version,
    about = "Diffusion-based approximate MPC for a planar arm"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: out/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads [default: $DAMPC_THREADS, else all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Run the noisy expert and write the filtered dataset.
    Collect,
    /// Train the diffusion model and the regression baseline.
    Train {
        /// Train only the diffusion model.
        #[arg(long)]
        skip_lsm: bool,
    },
    /// Closed-loop evaluation of the configured policies.
    Eval,
    /// Closed-loop evaluation of the ablation variants.
    Ablate,
    /// Finite-difference checks of the network and OCP gradients.
    Gradcheck,
    /// End-effector density of expert, diffusion and regression plans from
    /// one start and target.
    Heatmap {
        /// Start configuration, comma separated [default: episode 0 of the seed].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Target pose `x,y,theta` [default: episode 0 of the seed].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        target: Option<Vec<f64>>,
        /// Expert random starts.
        #[arg(long, default_value_t = 32)]
        starts: usize,
        /// Diffusion samples.
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Collect => "collect",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
            Command::Heatmap { .. } => "heatmap",
        }
    }
}

/// Thread count from the flag, else the environment.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let k = match flag {
        Some(k) => Some(k),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Failure::usage(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            })?),
            Err(_) => None,
        },
    };
    if k == Some(0) {
        return Err(Failure::usage("thread count must be at least 1"));
    }
    Ok(k)
}

/// Runs a parsed command line. Work happens on a pool of the requested size.
pub fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count(cli.common.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        builder = builder.num_threads(k);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::internal(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, &cli.common))
}
