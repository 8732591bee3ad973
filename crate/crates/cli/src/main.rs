//! `hass`: corpus preparation, target and draft training, benchmarking and
//! generation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hass_core::engine::Method;
use hass_core::training::DataMode;
use hass_core::HassError;

use config::{DecodeFlags, NamedPath};

#[derive(Parser)]
#[command(name = "hass", version, about = "Speculative decoding with harmonized draft heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the character vocabulary and token cache from a text file.
    Prepare(PrepareArgs),
    /// Train the target model on the prepared corpus.
    TrainTarget(TrainTargetArgs),
    /// Train a draft head against a target checkpoint.
    TrainDraft(TrainDraftArgs),
    /// Compare decoding methods and drafters over held-out prompts.
    Bench(BenchArgs),
    /// Continue a prompt and print the text.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTargetArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_data_mode(s: &str) -> Result<DataMode, String> {
    match s {
        "fixed" => Ok(DataMode::Fixed),
        "self-generated" | "self_generated" => Ok(DataMode::SelfGenerated),
        _ => Err(format!("unknown data mode {s:?} (expected fixed or self-generated)")),
    }
}

#[derive(Args)]
struct TrainDraftArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    dataset_cache: Option<PathBuf>,
    /// Number of aligned training forwards.
    #[arg(long)]
    align_steps: Option<usize>,
    /// K of the Top-K distillation loss.
    #[arg(long)]
    topk_k: Option<usize>,
    /// Weight of the Top-K distillation loss (0 disables it).
    #[arg(long)]
    topk_weight: Option<f64>,
    #[arg(long)]
    cls_weight: Option<f64>,
    #[arg(long)]
    reg_weight: Option<f64>,
    #[arg(long, value_parser = parse_data_mode)]
    data_mode: Option<DataMode>,
    #[arg(long)]
    detach_between_forwards: Option<bool>,
    #[arg(long)]
    train_embedding: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Draft checkpoint as NAME=PATH; repeat for a sweep.
    #[arg(long = "draft")]
    drafts: Vec<NamedPath>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    temperatures: Option<Vec<f64>>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep: alignment steps of the trained drafters.
    #[arg(long, value_delimiter = ',')]
    sweep_align_steps: Option<Vec<usize>>,
    /// Sweep: Top-K loss K values.
    #[arg(long, value_delimiter = ',')]
    sweep_topk_k: Option<Vec<usize>>,
    /// Sweep: Top-K loss weights.
    #[arg(long, value_delimiter = ',')]
    sweep_topk_weight: Option<Vec<f64>>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    draft: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    /// Keep only the k most likely tokens (0 disables the filter).
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Print one accept/reject line per cycle to standard error.
    #[arg(long)]
    trace: bool,
}

fn exit_code(e: &HassError) -> u8 {
    match e {
        HassError::Config(_) | HassError::Parameter(_) | HassError::Capacity(_) => 2,
        HassError::Data(_) | HassError::Format(_) | HassError::Load(_) | HassError::Io(_) | HassError::Json(_) => 3,
        HassError::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::TrainTarget(a) => commands::train_target(a),
        Command::TrainDraft(a) => commands::train_draft(a),
        Command::Bench(a) => commands::bench(a),
        Command::Generate(a) => commands::generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
