//! `kao` command line: simulate streams, run aggregation experiments and
//! export plot data.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// Error class of a failed command; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration (exit code 2).
    Usage(String),
    /// Anything that went wrong while running (exit code 1).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "kao", version, about = "Online aggregation of Kalman-filter experts")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for replications (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The configuration as given (by default the paper-sized study).
    Config,
    /// No state noise and observation variance 1e-8.
    ZeroNoise,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a stream and write `stream.csv` and `truth.csv`.
    Simulate {
        #[arg(long, value_enum, default_value_t = Preset::Config)]
        preset: Preset,
    },
    /// Run every configured rule and write one run directory per rule.
    Run {
        /// Input stream CSV; simulated from the configuration when absent.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Comma-separated rule names; overrides the configuration.
        #[arg(long, value_delimiter = ',')]
        rules: Option<Vec<String>>,
        /// Number of simulated replications; overrides the configuration.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Collect run directories into plot-ready CSV files.
    Plotdata {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Fit a random-walk model by EM on a CSV file.
    EmFit {
        /// Input CSV with a header row.
        #[arg(long)]
        data: PathBuf,
        /// Response column; every other column is a covariate.
        #[arg(long)]
        response: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Also estimate the initial state mean.
        #[arg(long)]
        estimate_theta0: bool,
    },
}

/// Parse-free entry point used by `main` and the tests.
pub fn execute(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => config::ExperimentConfig::load(path)?,
        None => config::ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be >= 1"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate { preset } => commands::simulate(&cfg, preset),
        Command::Run {
            stream,
            rules,
            replications,
        } => {
            if let Some(rules) = rules {
                cfg.aggregation.rules = rules;
            }
            if let Some(n) = replications {
                cfg.replications = n;
            }
            cfg.validate().map_err(Failure::Usage)?;
            commands::run(&cfg, stream.as_deref())
        }
        Command::Plotdata { runs } => commands::plotdata(&runs, &cfg.out),
        Command::EmFit {
            data,
            response,
            iterations,
            estimate_theta0,
        } => {
            if let Some(r) = response {
                cfg.experts.response = r;
            }
            if let Some(n) = iterations {
                cfg.experts.em_iter = n;
            }
            cfg.validate().map_err(Failure::Usage)?;
            commands::em_fit_csv(&cfg, &data, estimate_theta0)
        }
    }
}
