mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sepbart", version, about = "Separable tree-ensemble effects of multivariate exposures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Number of MCMC chains (overrides `fit.chains`).
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// Override any config key, e.g. `--set fit.iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated data set and its oracle quantities.
    Simulate,
    /// Fit the model and write one draw file per chain.
    Fit,
    /// Effect estimates and importance from draw files.
    Estimate {
        #[arg(long, num_args = 1.., required = true)]
        draws: Vec<PathBuf>,
    },
    /// Convergence, overlap and trimmed-effect checks.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        draws: Vec<PathBuf>,
    },
    /// Replicate simulation study.
    Study,
}

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Core(sepbart::Error),
    Io(String),
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn record(&self) -> serde_json::Value {
        let (kind, message, problems) = match self {
            CliError::Config(p) => ("config", format!("{} invalid configuration key(s)", p.len()), p.clone()),
            CliError::Core(e) => ("model", e.to_string(), Vec::new()),
            CliError::Io(m) => ("io", m.clone(), Vec::new()),
            CliError::Runtime(m) => ("runtime", m.clone(), Vec::new()),
        };
        json!({ "status": "error", "kind": kind, "message": message, "problems": problems })
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<sepbart::Error> for CliError {
    fn from(e: sepbart::Error) -> Self {
        match e {
            sepbart::Error::InvalidConfig(m) => CliError::Config(m.split("; ").map(String::from).collect()),
            other => CliError::Core(other),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(c) = cli.chains {
        overrides.push(format!("fit.chains={c}"));
    }
    overrides.extend(cli.overrides);
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg, &cli.out),
        Command::Fit => commands::fit_cmd(&cfg, &cli.out),
        Command::Estimate { draws } => commands::estimate(&cfg, &cli.out, draws),
        Command::Diagnose { draws } => commands::diagnose(&cfg, &cli.out, draws),
        Command::Study => commands::study(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code())
        }
    }
}
