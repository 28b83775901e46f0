//! `e2depth`: event-to-depth pipeline driver.
//!
//! Subcommands: `simulate` (frames -> events), `encode` (events -> voxel
//! grids), `train`, `predict`, `eval`, and `info`. Exit codes: 0 on success,
//! 1 on runtime failure, 2 on usage or configuration errors.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use settings::{CliError, Settings};

#[derive(Parser)]
#[command(name = "e2depth", version, about = "Event-to-depth pipeline")]
struct Cli {
    /// JSON config file holding flat dotted keys (e.g. "train.lambda").
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.epochs=3 (repeatable,
    /// last writer wins).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// RNG seed; falls back to the config, then $E2D_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print progress details (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an event stream from a directory of PGM frames.
    Simulate {
        /// Directory of NNNNNN.pgm intensity frames.
        #[arg(long)]
        frames: PathBuf,
        /// Output EVT1 file.
        #[arg(long)]
        out: PathBuf,
        /// Frame rate used to synthesize timestamps.
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// JSON array of per-frame timestamps in microseconds (overrides --fps).
        #[arg(long)]
        timestamps: Option<PathBuf>,
    },
    /// Window an event stream and write voxel grids.
    Encode {
        /// Input EVT1 file.
        #[arg(long)]
        events: PathBuf,
        /// Output directory for NNNNNN.vox grids.
        #[arg(long)]
        out_dir: PathBuf,
        /// Window span in microseconds.
        #[arg(long, default_value_t = 50_000)]
        delta_t: u64,
        /// Apply zero-mean unit-variance normalization of non-zero entries.
        #[arg(long)]
        normalize: bool,
    },
    /// Train the network on a dataset root with a split.json.
    Train {
        /// Dataset root containing sequence directories and split.json.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, log, and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict depth for one sequence from a checkpoint.
    Predict {
        /// Checkpoint file (.e2dw with .json sidecar).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for NNNNNN.dpt and NNNNNN.pgm renderings.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted .dpt files against ground truth.
    Eval {
        /// Directory of predicted .dpt files.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth .dpt files with matching names.
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated cut-off distances in meters.
        #[arg(long, default_value = "10,20,30")]
        cutoffs: String,
        /// Optional directory for metrics.json and metrics.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Describe a pipeline file (.evt1, .dpt, .e2dw, manifest.json).
    Info { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = Settings::load(cli.config.as_deref(), &cli.set)?;
    let seed = resolve_seed(cli.seed, &mut settings)?;
    let verbose = cli.verbose;
    match cli.command {
        Command::Simulate {
            frames,
            out,
            fps,
            timestamps,
        } => commands::simulate::run(&frames, &out, fps, timestamps.as_deref(), &mut settings, verbose),
        Command::Encode {
            events,
            out_dir,
            delta_t,
            normalize,
        } => commands::encode::run(&events, &out_dir, delta_t, normalize, &mut settings, verbose),
        Command::Train { data, out, resume } => {
            commands::train::run(&data, &out, resume.as_deref(), seed, &mut settings, verbose)
        }
        Command::Predict {
            checkpoint,
            data,
            out,
        } => commands::predict::run(&checkpoint, &data, &out, &mut settings, verbose),
        Command::Eval {
            pred,
            gt,
            cutoffs,
            out_dir,
        } => commands::eval::run(&pred, &gt, &cutoffs, out_dir.as_deref(), &mut settings),
        Command::Info { path } => commands::info::run(&path, &mut settings),
    }?;
    Ok(())
}

/// Seed precedence: --seed, then config key `train.seed`, then $E2D_SEED,
/// then 0.
fn resolve_seed(flag: Option<u64>, settings: &mut Settings) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = settings.peek_u64("train.seed")? {
        return Ok(s);
    }
    match std::env::var("E2D_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::usage(format!("E2D_SEED is not an integer: {v}"))),
        Err(_) => Ok(0),
    }
}
