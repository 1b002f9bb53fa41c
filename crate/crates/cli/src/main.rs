use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use momkd::{Error, ErrorKind};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "momkd", version, about = "Momentum-memory cross-modal distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply the configured domain shift before saving.
        #[arg(long)]
        shift: bool,
    },
    /// Train a model and write checkpoint, metrics and dynamics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the k-means memory fixed.
        #[arg(long)]
        freeze_memory: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        /// Checkpoint file or run directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV, defaults to `eval_<split>.csv` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarize memory usage dynamics of a training run.
    Dynamics {
        #[arg(long)]
        model_run: PathBuf,
    },
    /// Fixed versus momentum memory over several seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shifted: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Output directory for the ablation table.
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Top-k most similar patches for every memory component.
    InspectMemory {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        #[arg(long, default_value = "train")]
        split: String,
        /// Output JSON, defaults to `memory_topk.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, shift } => commands::synth(&config, &out, shift),
        Command::Train {
            config,
            data,
            out,
            freeze_memory,
            workers,
        } => commands::train(&config, &data, &out, freeze_memory, workers),
        Command::Eval {
            model,
            data,
            split,
            out,
            workers,
        } => commands::eval(&model, &data, &split, out.as_deref(), workers),
        Command::Dynamics { model_run } => commands::dynamics(&model_run),
        Command::Compare {
            config,
            data,
            shifted,
            seeds,
            out,
            workers,
        } => commands::compare(&config, &data, &shifted, &seeds, &out, workers),
        Command::InspectMemory {
            model,
            data,
            topk,
            split,
            out,
        } => commands::inspect_memory(&model, &data, topk, &split, out.as_deref()),
        Command::Gradcheck { config, seed } => commands::gradcheck(config.as_deref(), seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
