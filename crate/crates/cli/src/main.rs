//! `changecast`: synthesize or derive data, train detectors and forecasters,
//! evaluate checkpoints and render plots.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "changecast", version, about = "Detect and forecast building-footprint change in satellite image series")]
struct Cli {
    /// Root for raw series (`raw/`), derived patches (`derived/`) and runs (`runs/`).
    #[arg(long, env = "CHANGECAST_DATA", default_value = "data", global = true)]
    data_root: PathBuf,

    /// More logging (-v debug, -vv trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// Only log warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

/// Layered configuration: defaults, then the file, then `--set`, then `--seed`.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON file whose keys override the defaults. Unknown keys are rejected.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Dotted-path override such as `augment.mirror=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root seed from which every random stream is derived.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Derived dataset [default: <data-root>/derived].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Run directory [default: <data-root>/runs/<task>].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Single-worker loading so that reruns reproduce every logged loss bit for bit.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world of monthly location series.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root [default: <data-root>/raw].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },

    /// Cut location series into fixed-range patch pairs with a location split.
    Derive {
        /// Location series root [default: <data-root>/raw].
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
        /// Output directory [default: <data-root>/derived].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Forecast ranges in months.
        #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12,15,18,21,24")]
        ranges: Vec<u32>,
        /// Seed of the location split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Pretrain the Siamese change detector on pairs of every range.
    TrainDetect {
        #[command(flatten)]
        train: TrainArgs,
        /// Ranges to pool [default: every derived bucket].
        #[arg(long, value_delimiter = ',')]
        ranges: Option<Vec<u32>>,
    },

    /// Train a single-image forecaster for one range.
    TrainForecast {
        #[command(flatten)]
        train: TrainArgs,
        /// Forecast range in months.
        #[arg(long)]
        range: u32,
        /// Backbone source: `scratch`, a detection checkpoint, or `external:<archive>`.
        #[arg(long, value_name = "SOURCE")]
        init: String,
    },

    /// Train the early/late time-range forecaster on the 24-month bucket.
    TrainTimerange {
        #[command(flatten)]
        train: TrainArgs,
        /// Backbone source: `scratch`, a detection checkpoint, or `external:<archive>`.
        #[arg(long, value_name = "SOURCE")]
        init: String,
    },

    /// Evaluate a checkpoint and write a report with plots.
    Eval {
        /// Checkpoint archive (`.npz` with its `.json` sidecar).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Derived dataset [default: <data-root>/derived].
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Ranges to evaluate [default: every bucket the task accepts].
        #[arg(long, value_delimiter = ',')]
        ranges: Option<Vec<u32>>,
        /// Report directory [default: <checkpoint dir>/eval].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Also report the F1-maximizing threshold on the evaluated data.
        #[arg(long)]
        oracle_threshold: bool,
        /// Evaluate at most this many evenly spaced patches per range.
        #[arg(long)]
        max_patches: Option<usize>,
        /// PR curve resolution (0 disables the curve).
        #[arg(long, default_value_t = 256)]
        pr_points: usize,
        /// Label of this model in plots [default: checkpoint file stem].
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Render plots from CSVs, evaluation reports or the published reference.
    Plot {
        /// Plot directory.
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// Evaluation reports to combine; their CSVs are rewritten first.
        #[arg(long = "report", value_name = "FILE")]
        reports: Vec<PathBuf>,
        /// Write and render the published F1-by-range reference curves.
        #[arg(long)]
        reference: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let root = cli.data_root;
    let result = match cli.command {
        Command::Synth { config, out } => commands::synth(&root, &config, out),
        Command::Derive { input, out, ranges, seed } => commands::derive(&root, input, out, &ranges, seed),
        Command::TrainDetect { train, ranges } => commands::train_detect(&root, &train, ranges),
        Command::TrainForecast { train, range, init } => commands::train_forecast(&root, &train, range, &init),
        Command::TrainTimerange { train, init } => commands::train_timerange(&root, &train, &init),
        Command::Eval {
            checkpoint,
            data,
            split,
            ranges,
            out,
            oracle_threshold,
            max_patches,
            pr_points,
            label,
            seed,
        } => commands::eval(
            &root,
            commands::EvalArgs {
                checkpoint,
                data,
                split,
                ranges,
                out,
                oracle_threshold,
                max_patches,
                pr_points,
                label,
                seed,
            },
        ),
        Command::Plot { dir, reports, reference } => commands::plot(&dir, &reports, reference),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
