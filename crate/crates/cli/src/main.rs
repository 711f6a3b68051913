//! `mmpp`: synthesize demos, fit curves, train autoencoders, sample,
//! evaluate success rates, replan online and export figures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mmpp",
    version,
    about = "Motion manifold primitives over via-point curves"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate demonstrations for env1, env2, env3 or pouring.
    SynthDemos {
        #[arg(long)]
        env: Option<String>,
        /// Number of pose demonstrations (pouring only).
        #[arg(long, default_value_t = 12)]
        count: usize,
    },
    /// Fit curve parameters to every demonstration.
    Fit {
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Basis count for pose demonstrations.
        #[arg(long, default_value_t = commands::POSE_BASES)]
        bases: usize,
    },
    /// Train an autoencoder on fitted demonstrations.
    Train {
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Comma-separated hidden widths, e.g. 256,256,256.
        #[arg(long)]
        hidden: Option<String>,
        /// `exact` or `hutchinson:<probes>`.
        #[arg(long)]
        trace_mode: Option<String>,
        /// Basis count for pose demonstrations.
        #[arg(long, default_value_t = commands::POSE_BASES)]
        bases: usize,
    },
    /// Draw trajectories from a trained model, or render stored parameters.
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Parameter file written by `fit`.
        #[arg(long)]
        from_params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// `gmm` or `kde`.
        #[arg(long)]
        density: Option<String>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Success-rate protocol on a planar demo set.
    Eval {
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Trained bundle for mmp++ / immp++ (kind follows its alpha).
        #[arg(long)]
        model: Option<PathBuf>,
        /// vmp-gauss or vmp-gmm when no model is given.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        density: Option<String>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Run the online replanning loop.
    Replan {
        /// `moving-obstacle` or a path to an environment JSON.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// JSON list of obstacles replacing the moving ones.
        #[arg(long)]
        obstacles: Option<PathBuf>,
        #[arg(long)]
        density: Option<String>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Latent scatter, sampled trajectories and loss curves as SVG.
    ExportPlot {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long)]
        density: Option<String>,
        #[arg(long)]
        components: Option<usize>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
}

impl From<mmpp::Error> for CliError {
    fn from(e: mmpp::Error) -> Self {
        use mmpp::Error as E;
        match e {
            E::Shape { .. }
            | E::Invalid { .. }
            | E::Io { .. }
            | E::Json { .. }
            | E::PhaseDomain { .. }
            | E::TimeDomain { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
