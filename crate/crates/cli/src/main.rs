mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, LevelFilter};

use crate::config::RunConfig;

/// Train, query and evaluate a convolutional-LSTM episodic memory on synthetic video.
#[derive(Parser, Debug)]
#[command(name = "epimem", version)]
struct Cli {
    /// Flat `key=value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

/// Where latent vectors come from: a latent CSV, or a checkpoint applied to a corpus.
#[derive(Args, Debug, Clone)]
pub struct LatentSource {
    /// Latent CSV written by `encode`.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pub latents: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a labeled synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the composite model, writing checkpoints and logs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Encode episodes into latent vectors (CSV).
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "episode")]
        data: Option<PathBuf>,
        #[arg(long)]
        episode: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Output CSV; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode episodes and add them to a memory file (created if missing).
    MemInsert {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "episode")]
        data: Option<PathBuf>,
        #[arg(long)]
        episode: Option<PathBuf>,
        /// Label for a single `--episode`; defaults to the class stored in the file.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Refit the class-mean PCA over all records after inserting.
        #[arg(long)]
        pca: bool,
    },
    /// Retrieve the closest memories to an episode; CSV on standard output.
    Query {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        top: Option<usize>,
        /// Compare in the memory's stored PCA space.
        #[arg(long)]
        pca: bool,
        /// Query with the first frame tiled across the encoder window.
        #[arg(long)]
        static_scene: bool,
    },
    /// Class-similarity matrix as CSV and optionally a PGM heatmap.
    SimMatrix {
        #[command(flatten)]
        source: LatentSource,
        #[arg(long)]
        pca: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// K-fold retrieval benchmark, without and with PCA.
    EvalRetrieval {
        #[command(flatten)]
        source: LatentSource,
        /// Directory for the summary table and per-fold reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-position PSNR of the model and of the mean-frame baseline.
    EvalPsnr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write reconstructed and predicted frames as PGM/PPM images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode file; only its first `enc_len` frames are used.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() {
    let level = match std::env::var("EPIMEM_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let outcome = RunConfig::resolve(cli.config.as_deref(), &sets).and_then(|cfg| commands::run(cli.command, cfg));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
