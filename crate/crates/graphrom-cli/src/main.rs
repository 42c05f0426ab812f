//! Pipeline driver: dataset generation, level building, training,
//! hyperparameter search, prediction, and evaluation as subcommands over a
//! single TOML configuration.
//!
//! Exit codes: 0 success, 1 compute failure, 2 usage or I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use graphrom::dataset::SplitLabel;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation, unreadable input, or invalid configuration.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] graphrom::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use graphrom::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e {
                E::Io { .. } | E::Parse { .. } | E::InvalidConfig(_) | E::Checkpoint { .. } => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "graphrom", version, about = "Graph-convolutional surrogate pipeline")]
struct Cli {
    /// TOML run configuration; pinned defaults apply when absent.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = logical cores); GRAPHROM_THREADS wins over this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset directory override.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Levels checkpoint override.
    #[arg(long, global = true, value_name = "FILE")]
    levels: Option<PathBuf>,
    /// Model checkpoint override.
    #[arg(long, global = true, value_name = "FILE")]
    model: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset: mesh, field files, and manifest.
    Gen,
    /// Build the two pooling levels from training-split gradients.
    Levels,
    /// Train the autoencoder against an existing levels checkpoint.
    Train {
        /// Epoch budget override.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Search architectures by Bayesian optimization.
    Hpo,
    /// Write predicted field files for one split.
    Predict {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Report field and integrated-coefficient errors for one split.
    Eval {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Print mesh and graph statistics.
    MeshInfo {
        /// Mesh file to inspect.
        mesh: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn label(self) -> SplitLabel {
        match self {
            SplitArg::Train => SplitLabel::Train,
            SplitArg::Val => SplitLabel::Val,
            SplitArg::Test => SplitLabel::Test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

/// Fold the command-line overrides into the loaded configuration.
fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if let Some(data) = &cli.data {
        config.paths.data_dir = data.clone();
    }
    if let Some(out) = &cli.out {
        config.paths.out_dir = out.clone();
    }
    if let Some(levels) = &cli.levels {
        config.paths.levels = Some(levels.clone());
    }
    if let Some(model) = &cli.model {
        config.paths.model = Some(model.clone());
    }
    Ok(config)
}

/// Thread count by precedence: GRAPHROM_THREADS, then --threads, then the
/// config file; 0 means the rayon default (logical cores).
fn resolve_threads(config: &RunConfig) -> Result<usize, CliError> {
    match std::env::var("GRAPHROM_THREADS") {
        Ok(text) => text
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("GRAPHROM_THREADS must be an integer, got {text:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(config.threads),
        Err(e) => Err(CliError::Usage(format!("GRAPHROM_THREADS: {e}"))),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = effective_config(cli)?;
    let threads = resolve_threads(&config)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Gen => commands::gen(&config),
        Command::Levels => commands::levels(&config),
        Command::Train { epochs } => commands::train(&config, *epochs),
        Command::Hpo => commands::hpo(&config),
        Command::Predict { split } => commands::predict(&config, split.label(), split.name()),
        Command::Eval { split } => commands::eval(&config, split.label(), split.name()),
        Command::MeshInfo { mesh } => commands::mesh_info(mesh),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
