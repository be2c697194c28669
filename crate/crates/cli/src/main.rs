//! `mdsp`: synthetic data, anchors, training, evaluation, inference and
//! timing for the multitask network.

mod commands;
mod config;
mod draw;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Format;
use error::Result;

#[derive(Parser)]
#[command(name = "mdsp", version, about = "Multitask detection, segmentation and pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [model], [train], [data], [decode] and [eval] sections.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=20`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster the boxes of a dataset into anchors.
    Anchors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, default_value_t = 9)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of detect,segment,pose to build and train.
        #[arg(long)]
        tasks: Option<String>,
        /// Evaluate on this dataset after training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Also write metrics.json and the resolved config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write overlay images and a predictions file.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run on every image of a dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Binary PPM images.
        images: Vec<PathBuf>,
    },
    /// Time the forward pass alone and with post-processing.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Without a checkpoint, a freshly initialized network is timed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<String>,
        /// Images per run.
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<config::Loaded> {
    config::load(common.config.as_deref(), &common.set)
}

fn tasks(s: &Option<String>) -> Result<Option<mdsp::TaskSet>> {
    s.as_deref().map(config::parse_tasks).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, count, seed } => commands::synth(load(&common)?, &out, count, seed),
        Command::Anchors { common, data, k, seed } => commands::anchors(load(&common)?, &data, k, seed),
        Command::Train { common, data, out, tasks: t, eval_data } => {
            let mut loaded = load(&common)?;
            if let Some(t) = tasks(&t)? {
                loaded.config.train.tasks = t;
            }
            commands::train_cmd(loaded, &data, &out, eval_data.as_deref())
        }
        Command::Eval { common, checkpoint, data, tasks: t, format, out } => {
            commands::eval_cmd(load(&common)?, &checkpoint, &data, tasks(&t)?, format, out.as_deref())
        }
        Command::Infer { common, checkpoint, out, data, images } => {
            commands::infer(load(&common)?, &checkpoint, &out, data.as_deref(), &images)
        }
        Command::Bench { common, checkpoint, tasks: t, images, repeats, format, out } => {
            commands::bench(load(&common)?, checkpoint.as_deref(), tasks(&t)?, images, repeats, format, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e);
            ExitCode::from(e.exit_code())
        }
    }
}
