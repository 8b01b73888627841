use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "valid", version, about = "Entropy-guided layer-fusion contrastive decoding over recorded traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic yes/no corpus: traces, questions and vocabulary
    Synth(SynthArgs),
    /// Replay traces under one or more decoding modes
    Decode(DecodeArgs),
    /// Encoding distortion rate per layer bucket
    Edr(EdrArgs),
    /// Mean entropy and accuracy of every layer decoded on its own
    Curves(CurvesArgs),
    /// Yes/no metrics of decode outcomes
    Score(ScoreArgs),
    /// Metric deltas against a baseline mode
    Compare(CompareArgs),
    /// Print a trace header
    InspectTrace(InspectArgs),
}

fn non_negative(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err("must be a finite number >= 0".into())
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err("must be in [0, 1]".into())
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err("must be a finite number > 0".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageArg {
    Logits,
    Probs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Vanilla,
    Valid,
    Vcd,
    VcdThenValid,
    ValidThenVcd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceArg {
    Probability,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerArg {
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PolicyArg {
    Incorrect,
    Drop,
    CoerceNo,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory
    #[arg(short, long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub questions: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Distortion strength d of the standard layer
    #[arg(long, default_value_t = 0.6, value_parser = unit_interval, allow_hyphen_values = true)]
    pub distortion: f64,
    /// Per-question uniform jitter added to the distortion
    #[arg(long, default_value_t = 0.25, value_parser = non_negative, allow_hyphen_values = true)]
    pub jitter: f64,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: u32,
    /// Number of encoder layers; the standard layer is the penultimate one
    #[arg(long, default_value_t = 25)]
    pub layers: u16,
    /// Non-standard layers that keep the clean signal
    #[arg(long, default_value_t = 12)]
    pub clean_layers: usize,
    #[arg(long, value_enum, default_value_t = StorageArg::Logits)]
    pub storage: StorageArg,
    /// Omit the noise-reference channel
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    /// Trace files or directories of `.vlt` files
    #[arg(required = true)]
    #[serde(skip)]
    pub traces: Vec<PathBuf>,
    #[arg(short, long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Decoding modes, comma separated
    #[arg(long, value_enum, value_delimiter = ',', default_value = "valid")]
    pub mode: Vec<ModeArg>,
    /// Contrast intensity of the fused-layer contrast
    #[arg(long, default_value_t = 1.0, value_parser = non_negative, allow_hyphen_values = true)]
    pub alpha: f64,
    /// Reliability threshold relative to the top standard-layer probability
    #[arg(long, default_value_t = 0.1, value_parser = unit_interval, allow_hyphen_values = true)]
    pub beta: f64,
    /// Contrast intensity of the noise-reference contrast
    #[arg(long, default_value_t = 1.0, value_parser = non_negative, allow_hyphen_values = true)]
    pub vcd_alpha: f64,
    /// Fuse only the k highest-entropy bucket layers (default: all)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    /// Preset name or explicit layer list such as `13,15,17` or `13-23`
    #[arg(long, default_value = "llava-v1.5")]
    pub bucket: String,
    /// Standard layer, required with an explicit layer list
    #[arg(long)]
    pub standard_layer: Option<u16>,
    /// Extra presets, one `name = layers ; standard` per line
    #[arg(long)]
    pub bucket_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SpaceArg::Probability)]
    pub space: SpaceArg,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub truncation: Toggle,
    #[arg(long, value_enum, default_value_t = SamplerArg::Greedy)]
    pub sampler: SamplerArg,
    /// Sampling temperature, used with `--sampler temperature`
    #[arg(long, value_parser = positive, allow_hyphen_values = true)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    #[serde(skip)]
    pub jobs: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeInputs {
    /// Trace files or directories of `.vlt` files
    #[arg(required = true)]
    #[serde(skip)]
    pub traces: Vec<PathBuf>,
    /// Question JSONL with gold labels
    #[arg(long)]
    #[serde(skip)]
    pub questions: PathBuf,
    /// Vocabulary JSON (array of token strings)
    #[arg(long)]
    #[serde(skip)]
    pub vocab: PathBuf,
    #[arg(short, long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    #[serde(skip)]
    pub jobs: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EdrArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub inputs: ProbeInputs,
    /// Buckets separated by `/`, e.g. `1-6/7-12/13-18/19-23,25`
    #[arg(long, conflicts_with = "bucket_size")]
    pub buckets: Option<String>,
    /// Split the non-standard layers into consecutive buckets of this size
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..))]
    pub bucket_size: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct CurvesArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub inputs: ProbeInputs,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Outcome JSONL files written by `decode`
    #[arg(required = true)]
    #[serde(skip)]
    pub outcomes: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub questions: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub vocab: PathBuf,
    #[arg(short, long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Treatment of answers that are neither yes nor no
    #[arg(long, value_enum, default_value_t = PolicyArg::Incorrect)]
    pub unparseable: PolicyArg,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Metrics CSV files written by `score`
    #[arg(required = true)]
    #[serde(skip)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value = "vanilla")]
    pub baseline: String,
    #[arg(short, long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub trace: PathBuf,
    /// Also print per-layer entropy and argmax at this step
    #[arg(long)]
    pub step: Option<usize>,
}
