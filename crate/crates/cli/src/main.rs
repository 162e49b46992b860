//! `sparseprior`: synthesize, preprocess, train, embed, evaluate and plot.

mod commands;
mod manifest;
mod plot;
mod synth;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Validation(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Diverged(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Triplet,
}

#[derive(Parser)]
#[command(name = "sparseprior", version, about = "Count autoencoder with a learned latent prior for single-cell clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled ZINB count matrix.
    Synth {
        /// JSON synth spec; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, split, normalize and select genes.
    Preprocess {
        /// Dense CSV, or a triplet matrix file with --genes and --cells.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        genes: Option<PathBuf>,
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a preprocessed directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory of `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write latent coordinates for every cell of a preprocessed matrix.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An `*_input.csv` written by `preprocess`.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster embeddings with k-means and score against labels.
    Evaluate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Defaults to the number of distinct labels.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fit centroids on these embeddings and assign the evaluated cells
        /// to the nearest one, instead of fitting on the evaluated cells.
        #[arg(long)]
        fit_embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scatter plot of embeddings coloured by label.
    Plot {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Project onto the first two principal components first.
        #[arg(long)]
        pca: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("SPARSEPRIOR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Validation(format!("SPARSEPRIOR_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out),
        Command::Preprocess {
            input,
            format,
            genes,
            cells,
            config,
            seed,
            out,
        } => commands::preprocess(&input, format, genes.as_deref(), cells.as_deref(), config.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            seed,
            resume,
            out,
        } => commands::train(config.as_deref(), &data, seed, resume.as_deref(), &out),
        Command::Embed { checkpoint, matrix, out } => commands::embed(&checkpoint, &matrix, &out),
        Command::Evaluate {
            embeddings,
            labels,
            k,
            seed,
            fit_embeddings,
            out,
        } => commands::evaluate(&embeddings, &labels, k, seed, fit_embeddings.as_deref(), &out),
        Command::Plot {
            embeddings,
            labels,
            pca,
            out,
        } => commands::plot(&embeddings, &labels, pca, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
