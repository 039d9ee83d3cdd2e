//! `rvla`: ingest driving logs, train the parallel trajectory decoder, and
//! evaluate it open- and closed-loop.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad paths, unreadable files, malformed config or data: exit 2.
    Input(String),
    /// Ordering or contract violations: exit 3.
    Contract(String),
    /// Non-finite losses or rewards during training: exit 4.
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Contract(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Contract(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<rvla_core::Error> for CliError {
    fn from(e: rvla_core::Error) -> Self {
        use rvla_core::Error as E;
        let m = e.to_string();
        match e {
            E::Io { .. } | E::Parse { .. } => CliError::Input(m),
            E::Shape(_) | E::Contract(_) | E::Checkpoint(_) => CliError::Contract(m),
            E::NonFinite(_) | E::NumericAbort(_) => CliError::Numeric(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rvla", version, about = "Parallel action-query trajectory decoder: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run-config file
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-clip work [default: 1]
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory for checkpoints, logs, tables and plots
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sft,
    Rl,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Open,
    Closed,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert one source's fixture file into a JSON-lines corpus
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Source tag: navsim, nuscenes, waymo, argoverse2, kitti, mapillary, once, idd
        #[arg(long)]
        source: String,
        /// Source file to read
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Corpus file to write
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
        /// Future waypoints kept per clip [default: model.horizon]
        #[arg(long)]
        horizon: Option<usize>,
        /// Keep a leading (0, 0) row among the horizon rows
        #[arg(long)]
        include_origin_row: bool,
    },
    /// Trajectory mean/variance per step and per-source clip counts
    Stats {
        #[command(flatten)]
        common: Common,
        /// Corpus to summarize [default: config corpus, else synthetic]
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Stats JSON to write [default: <out-dir>/stats.json]
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic maneuver corpus
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Number of clips [default: synth.count]
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated maneuvers: straight, left-turn, right-turn, stop, accelerate
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        /// Future waypoints per clip [default: model.horizon]
        #[arg(long)]
        horizon: Option<usize>,
        /// History states per clip [default: synth.history_len]
        #[arg(long)]
        history_len: Option<usize>,
        /// Corpus file to write
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Supervised fine-tuning, then GRPO fine-tuning
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Which stages to run; `rl` resumes from <out-dir>/post_sft.ckpt
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
    },
    /// Open-loop metrics and closed-loop scenario scores for a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Corpus whose validation split is scored [default: config corpus, else synthetic]
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Checkpoint to evaluate [default: <out-dir>/post_rl.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalMode::Both)]
        mode: EvalMode,
        /// JSON array of scenario specs [default: built-in suite]
        #[arg(long, value_name = "FILE")]
        scenarios: Option<PathBuf>,
        /// Closed-loop replanning rate in Hz [default: eval.replan_hz]
        #[arg(long)]
        replan_hz: Option<f64>,
    },
    /// SVG plots of history, ground truth and prediction for validation clips
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Checkpoint to plot [default: <out-dir>/post_rl.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Number of clips to plot [default: eval.plot_clips]
        #[arg(long)]
        clips: Option<usize>,
    },
}

/// Training hyperparameters that can be set from the command line.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    /// Corpus to train on [default: config corpus, else synthetic]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Encoder/decoder width
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub sft_lr: Option<f64>,
    #[arg(long)]
    pub sft_epochs: Option<usize>,
    #[arg(long)]
    pub rl_lr: Option<f64>,
    #[arg(long)]
    pub rl_epochs: Option<usize>,
    /// GRPO samples per clip
    #[arg(long)]
    pub group_size: Option<usize>,
    /// KL weight towards the post-SFT policy
    #[arg(long)]
    pub kl_beta: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest {
            common,
            source,
            input,
            output,
            horizon,
            include_origin_row,
        } => commands::ingest(&common, &source, &input, &output, horizon, include_origin_row),
        Command::Stats { common, corpus, output } => commands::stats(&common, corpus, output),
        Command::GenSynth {
            common,
            count,
            kinds,
            horizon,
            history_len,
            output,
        } => commands::gen_synth(&common, count, kinds, horizon, history_len, &output),
        Command::Train {
            common,
            overrides,
            stage,
        } => commands::train(&common, &overrides, stage),
        Command::Eval {
            common,
            corpus,
            checkpoint,
            mode,
            scenarios,
            replan_hz,
        } => commands::eval(&common, corpus, checkpoint, mode, scenarios, replan_hz),
        Command::Plot {
            common,
            corpus,
            checkpoint,
            clips,
        } => commands::plot(&common, corpus, checkpoint, clips),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
