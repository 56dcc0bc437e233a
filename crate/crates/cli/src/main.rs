mod commands;
mod fetch;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idcl_core::Variant;

#[derive(Parser)]
#[command(name = "idcl", version, about = "Intent-disentangled recommendation experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct DatasetArgs {
    /// Dataset name; `ml-100k` finds its files in --data-dir.
    #[arg(long, default_value = "ml-100k")]
    pub dataset: String,
    /// Directory with the dataset files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Interaction file for custom datasets.
    #[arg(long, requires = "concepts")]
    pub interactions: Option<PathBuf>,
    #[arg(long, default_value = "movielens-tsv")]
    pub interaction_format: String,
    /// Item-concept file for custom datasets.
    #[arg(long, requires = "interactions")]
    pub concepts: Option<PathBuf>,
    #[arg(long, default_value = "pairs-tsv")]
    pub concept_format: String,
    /// Drop interactions rated below this.
    #[arg(long)]
    pub min_rating: Option<f64>,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "idcl")]
    pub variant: Variant,
    /// Single seed (overrides `train.seed`).
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output root.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Hold out this many validation and as many test users (overrides `split.heldout_users`).
    #[arg(long)]
    pub heldout_users: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Download and unpack MovieLens 100k.
    Fetch {
        #[arg(long, default_value = "data/ml-100k")]
        out: PathBuf,
        #[arg(long, default_value = fetch::ML_100K_URL)]
        url: String,
        /// Expected SHA-256 of the archive.
        #[arg(long)]
        sha256: Option<String>,
    },
    /// Build the graph and write the split manifest for each seed.
    Prepare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a variant for each seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Record that the run must be bit-reproducible (training is always single-threaded and seeded).
        #[arg(long)]
        deterministic: bool,
        /// Replace an existing run directory trained with a different config.
        #[arg(long)]
        force: bool,
    },
    /// Re-evaluate trained checkpoints and aggregate over seeds.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// `val` or `test`.
        #[arg(long, default_value = "test")]
        fold: String,
    },
    /// Write block-similarity, proportion, distribution and embedding tables.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        /// Behaviors sampled per intent group.
        #[arg(long, default_value_t = 500)]
        samples: usize,
        /// Intents listed per behavior in the distribution table.
        #[arg(long, default_value_t = 3)]
        top: usize,
        /// Training behaviors covered by the slice exports.
        #[arg(long, default_value_t = 2000)]
        slice_rows: usize,
    },
    /// Tabulate metrics across variants and seeds.
    Compare {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, value_delimiter = ',', default_value = "idcl,lightgcn,no-icl,no-cr")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Fetch { out, url, sha256 } => commands::fetch(&out, &url, sha256.as_deref()),
        Command::Prepare { run } => commands::prepare(&run),
        Command::Train {
            run,
            deterministic,
            force,
        } => commands::train(&run, deterministic, force),
        Command::Evaluate { run, fold } => commands::evaluate(&run, &fold),
        Command::Analyze {
            run,
            samples,
            top,
            slice_rows,
        } => commands::analyze(&run, samples, top, slice_rows),
        Command::Compare {
            data,
            variants,
            seeds,
            out,
        } => commands::compare(&data, &variants, &seeds, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
