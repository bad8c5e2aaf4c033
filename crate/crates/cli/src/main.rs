use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentmda::Execution;

mod commands;
mod config;

use config::Loaded;

#[derive(Parser)]
#[command(name = "latentmda", version, about = "ES-MDA history matching of binary facies models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw unconditioned channel realizations.
    GeneratePrior,
    /// Fit the PCA parameterization to a training directory.
    FitPca,
    /// Train the VAE parameterization on a training directory.
    FitVae,
    /// Run ES-MDA on a prior ensemble.
    Assimilate,
    /// Latent perturbation sweep.
    PerturbSweep,
    /// Variance and failure metrics for a prior/posterior pair.
    Metrics,
    /// Canned Case-1 or Case-2 experiment.
    Experiment,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error on {}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<latentmda::Error> for CliError {
    fn from(e: latentmda::Error) -> Self {
        match e {
            latentmda::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config is required"))?;
    let loaded = Loaded::load(path, cli.seed)?;
    let workers = cli.workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    if workers == 0 {
        return Err(CliError::config("--workers must be at least 1"));
    }
    latentmda::exec::init_workers(workers);
    let exec = if workers == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let out = &cli.out;
    match cli.command {
        Command::GeneratePrior => commands::generate_prior(&loaded, out, exec),
        Command::FitPca => commands::fit_pca(&loaded, out),
        Command::FitVae => commands::fit_vae(&loaded, out, exec),
        Command::Assimilate => commands::assimilate(&loaded, out, exec),
        Command::PerturbSweep => commands::perturb_sweep(&loaded, out, exec),
        Command::Metrics => commands::metrics(&loaded, out),
        Command::Experiment => commands::experiment(&loaded, out, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latentmda: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
