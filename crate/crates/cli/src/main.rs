//! `embdiff`: train, sample, evaluate and sweep embedding-space diffusion
//! models.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use embdiff::harness::{LengthMode, TaskKind};
use embdiff::inference::{CombineOrder, GuidanceSchedule, SamplerKind};

/// Environment variable naming the root directory for data, checkpoints and
/// run outputs.
pub const HOME_ENV: &str = "EMBDIFF_HOME";

#[derive(Debug, Parser)]
#[command(name = "embdiff", version, about = "Embedding-space sequence-to-sequence diffusion")]
pub struct Cli {
    /// Root for default data, checkpoint and run paths.
    #[arg(long, global = true, env = HOME_ENV, default_value = ".")]
    pub home: PathBuf,

    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task as train.jsonl / test.jsonl.
    MakeData(MakeDataArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Generate outputs from a checkpoint.
    Sample(SampleArgs),
    /// Score hypotheses (BLEU-4, ROUGE-L, self-BLEU, length).
    Eval(EvalArgs),
    /// Run a grid of inference settings over a test set.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long, default_value = "reverse")]
    pub task: TaskKind,
    /// Content words, excluding special tokens.
    #[arg(long, default_value_t = 100)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 20_000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: <home>/data/<task>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl (default: <home>/data/reverse).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (default: <home>/runs/train).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key = value` file; keys are the long flag names below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value = "fewstep")]
    pub sampler: SamplerKind,
    /// Use the second-order multistep update with the few-step sampler.
    #[arg(long)]
    pub second_order: bool,
    #[arg(long, default_value_t = 1.0)]
    pub cfg_scale: f64,
    #[arg(long, default_value = "constant")]
    pub cfg_schedule: GuidanceSchedule,
    #[arg(long, default_value = "none")]
    pub order: CombineOrder,
    /// Clamp temperature; 0 is nearest-token clamping.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint directory (a run directory's `final` is used if present).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Condition text for a single sample.
    #[arg(long, conflicts_with = "input")]
    pub condition: Option<String>,
    /// JSONL file of {"src", "trg"} records to sample for.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Hypothesis JSONL written for --input (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Output length; defaults to the reference (or condition) length.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Several seeds at once for --input (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Per-step CSV of (step, t, mean_nn_distance) for --condition.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of {condition_id, seed, hypothesis, reference}.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub summary: PathBuf,
    #[arg(long)]
    pub per_condition: PathBuf,
    /// Seeds to score (default: every seed in the input).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, required_unless_present = "plots_only")]
    pub checkpoint: Option<PathBuf>,
    /// Test JSONL of {"src", "trg"} records.
    #[arg(long, required_unless_present = "plots_only")]
    pub test: Option<PathBuf>,
    /// Output directory (default: <home>/runs/sweep).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Settings file; keys: scales, taus, schedules, orders, steps, seeds.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub schedules: Option<Vec<GuidanceSchedule>>,
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<CombineOrder>>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "reference")]
    pub length_mode: LengthMode,
    /// Only use the first N test records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Redraw the plots from an existing sweep.csv and exit.
    #[arg(long)]
    pub plots_only: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_secs()
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
