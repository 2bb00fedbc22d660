//! `fhspec`: generate scenarios, run the estimation stages one at a time or
//! end to end, run Monte Carlo sweeps and render their outputs.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 a pipeline
//! stage failed.

mod cmd;
mod config;
mod out;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fhspec::pipeline::StageError;

use config::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "fhspec",
    version,
    about = "Frequency-hopping spectrum estimation from incomplete samples"
)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the scenario, add noise and drop samples.
    Generate,
    /// AF, IAF, WVD and spectrogram of a signal.
    Transform {
        /// Signal CSV (`n,re,im,missing`); generated from the config when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Kernelled distribution with an optional fixed pre-filter.
    Kernel {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Pre-filter parameters `rho1,rho2,xi1,xi2`.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        ecsk: Option<Vec<f64>>,
    },
    /// Search the pre-filter parameters.
    Optimize {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Independent searches for the parameter scatter.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// One full trial with every intermediate representation.
    Reconstruct {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Monte Carlo statistics of the first SNR, rate and method.
    Evaluate,
    /// Every SNR × rate × method condition; resumes from an earlier run.
    Sweep,
    /// Images and charts for the CSV artifacts under a directory.
    Plot {
        /// Directory to render; the output root when absent.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// Error with the process exit code it maps to.
#[derive(Debug, Clone)]
pub struct Failure {
    pub code: u8,
    pub stage: Option<String>,
    pub message: String,
}

impl Failure {
    pub fn validation(message: String) -> Self {
        Self {
            code: 2,
            stage: None,
            message,
        }
    }

    pub fn stage(stage: &str, message: String) -> Self {
        Self {
            code: 3,
            stage: Some(stage.to_string()),
            message,
        }
    }

    pub fn from_core(e: fhspec::Error) -> Self {
        match e {
            fhspec::Error::Validation(m) => Self::validation(m),
            other => Self::stage("pipeline", other.to_string()),
        }
    }

    pub fn from_stage(e: StageError) -> Self {
        let mut f = Self::from_core(e.error);
        f.stage = Some(e.stage.name().to_string());
        f
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = cli.opts.resolve()?;
    let root = cli.opts.output_root(&cfg);
    let ctx = cmd::Context { cfg, root };
    let dir = match cli.command {
        Command::Generate => cmd::generate(&ctx)?,
        Command::Transform { input } => cmd::transform(&ctx, input.as_deref())?,
        Command::Kernel { input, ecsk } => cmd::kernel(&ctx, input.as_deref(), ecsk.as_deref())?,
        Command::Optimize { input, runs } => cmd::optimize(&ctx, input.as_deref(), runs, cli.opts.de_seed)?,
        Command::Reconstruct { input } => cmd::reconstruct(&ctx, input.as_deref(), cli.opts.de_seed)?,
        Command::Evaluate => cmd::evaluate(&ctx)?,
        Command::Sweep => cmd::sweep(&ctx)?,
        Command::Plot { dir } => plot::plot(&dir.unwrap_or_else(|| ctx.root.clone()))?,
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f.stage {
                Some(s) => eprintln!("error in stage {s}: {}", f.message),
                None => eprintln!("error: {}", f.message),
            }
            ExitCode::from(f.code)
        }
    }
}
