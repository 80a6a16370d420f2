mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relab_core::guard::GuardMethod;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// Reliability lab for quantized DNN accelerators.
#[derive(Debug, Parser)]
#[command(name = "relab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Requantize a model to another bit width.
    Quantize(QuantizeArgs),
    /// Extract per-layer activation bounds from a validation set.
    Ranges(RangesArgs),
    /// Run one input through the array model, optionally with a fault.
    Infer(InferArgs),
    /// Run a statistical fault-injection campaign.
    Campaign(CampaignArgs),
    /// Sweep bit widths and protection methods.
    Sweep(SweepArgs),
    /// Render a campaign result or sweep table as CSV or JSON.
    Report(ReportArgs),
    /// Analytic hardware cost of a protection method.
    Cost(CostArgs),
    /// Re-run the command recorded in an artifact and compare the output.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ThreadArgs {
    /// Worker threads (0 = all cores).
    #[arg(long, env = "RELAB_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ArrayArgs {
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
    #[arg(long, default_value_t = 100e6)]
    pub clock_hz: f64,
    /// Vector-unit lanes for pooling/activation layers (default: cols).
    #[arg(long)]
    pub lanes: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlanArgs {
    /// Confidence level, converted to a two-sided normal quantile.
    #[arg(long, conflicts_with = "t")]
    pub confidence: Option<f64>,
    /// Normal quantile used directly (default 1.96).
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long = "error", default_value_t = 0.01)]
    pub error_margin: f64,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    /// Upper limit on repetitions.
    #[arg(long)]
    pub max_repetitions: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FaultArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bits flipped per fault.
    #[arg(long, default_value_t = 1)]
    pub k_bits: u32,
    /// Draw a new fault for every input instead of one per repetition.
    #[arg(long)]
    pub per_input: bool,
    /// Also inject into flatten-layer inputs.
    #[arg(long)]
    pub include_flatten: bool,
    /// Keep per-input outcome flags in the result.
    #[arg(long)]
    pub record_flags: bool,
    /// Evaluate only the first N inputs of the data set.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bits: u32,
    /// Data set to report accuracy on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RangesArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Range-extraction set.
    #[arg(long)]
    pub data: PathBuf,
    /// Requantize the model first.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Held-out set to report coverage on.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Data set file holding the input.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub bits: Option<u32>,
    #[command(flatten)]
    pub array: ArrayArgs,
    /// Fault as LAYER:INDEX:BIT[,BIT...]; repeated flags on the same word XOR together.
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    #[arg(long, default_value = "none")]
    pub guard: GuardMethod,
    #[arg(long)]
    pub bounds: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CampaignArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, default_value = "none")]
    pub guard: GuardMethod,
    /// Bounds file at the campaign's bit width.
    #[arg(long, conflicts_with = "validation")]
    pub bounds: Option<PathBuf>,
    /// Extract bounds from this set instead of reading a bounds file.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Run the fault-free null campaign.
    #[arg(long)]
    pub no_faults: bool,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub array: ArrayArgs,
    #[command(flatten)]
    pub fault: FaultArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub threads: ThreadArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Range-extraction set, needed for any protection method.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,7,6,5,4")]
    pub bits: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "none,m1,m2,m3")]
    pub methods: Vec<GuardMethod>,
    /// `same-width` or BITS:METHOD.
    #[arg(long, default_value = "same-width")]
    pub baseline: String,
    /// csv or json; inferred from the output extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub array: ArrayArgs,
    #[command(flatten)]
    pub fault: FaultArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub threads: ThreadArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Campaign result or sweep table (JSON).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Output file; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CostArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, default_value = "m3")]
    pub method: GuardMethod,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Artifact written by an earlier run.
    pub artifact: PathBuf,
    /// Keep the regenerated artifact here instead of a temporary location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Quantize(a) => commands::quantize(&a),
        Command::Ranges(a) => commands::ranges(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Campaign(a) => commands::campaign(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("relab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
