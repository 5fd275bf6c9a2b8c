//! `spectral-nlctf`: phantom → project → recon → evaluate → decompose.

mod pipeline;
mod preview;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nlctf_core::config::{self, Profile};
use nlctf_core::NlctfError;

#[derive(Parser)]
#[command(name = "spectral-nlctf", version, about = "Spectral CT simulation and non-local tensor reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file, layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set recon.mu=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Built-in base profile. Defaults to `desk` when no config file is given.
    #[arg(long, global = true, value_parser = ["desk", "paper-sim"])]
    profile: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Algo {
    Sart,
    Nlctf,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the phantom into a ground-truth volume and label map.
    Phantom,
    /// Simulate photon counts and log-domain sinograms from a truth volume.
    Project {
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Reconstruct a spectral volume from log-domain sinograms.
    Recon {
        #[arg(long, value_enum, default_value = "nlctf")]
        algo: Algo,
        #[arg(long)]
        sinogram: Option<PathBuf>,
        /// Reference volume; enables RMSE/PSNR columns in the trace.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare a volume against a reference.
    Evaluate {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Per-pixel basis-material decomposition.
    Decompose {
        #[arg(long)]
        volume: PathBuf,
    },
}

fn exit_code(e: &NlctfError) -> u8 {
    match e {
        NlctfError::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> nlctf_core::Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| NlctfError::Config(format!("threads: {e}")))?;
    }
    let profile = cli.common.profile.as_deref().map(Profile::parse).transpose()?;
    let cfg = config::load(cli.common.config.as_deref(), profile, &cli.common.set, cli.common.seed)?;
    let out = cfg.output.dir.clone();
    match cli.command {
        Command::Phantom => pipeline::phantom(&cfg, &out),
        Command::Project { truth } => pipeline::project(&cfg, &out, truth),
        Command::Recon {
            algo,
            sinogram,
            reference,
        } => pipeline::recon(&cfg, &out, algo, sinogram, reference),
        Command::Evaluate { volume, reference } => pipeline::evaluate(&out, &volume, &reference),
        Command::Decompose { volume } => pipeline::decompose(&cfg, &out, &volume),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
