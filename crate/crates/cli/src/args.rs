use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mrgd::{HalNormalization, HalScope, SentencePeriod};

#[derive(Debug, Parser)]
#[command(name = "mrgd", version, about = "Reward-guided decoding for image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode one caption and print it.
    Decode(DecodeArgs),
    /// Print the rewards of a given caption.
    Score(ScoreArgs),
    /// Compute hallucination and recall metrics for a captions file.
    Metrics(MetricsArgs),
    /// Decode a whole dataset and report corpus metrics.
    Bench(BenchArgs),
    /// Run a benchmark for every cell of a (w, k, T) grid and write a CSV.
    Sweep(SweepArgs),
    /// Write the annotation file of a simulated dataset.
    Simulate(SimulateArgs),
}

/// Options shared by every command that talks to backends.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Similarity threshold for a recalled object.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_total_tokens: Option<u32>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// `none` or `minmax`.
    #[arg(long)]
    pub hal_normalization: Option<HalNormalization>,
    /// `full_prefix` or `last_chunk`.
    #[arg(long)]
    pub hal_scope: Option<HalScope>,
    /// URL, fixture:<path> or sim:<path>.
    #[arg(long)]
    pub backend_generate: Option<String>,
    #[arg(long)]
    pub backend_score: Option<String>,
    #[arg(long)]
    pub backend_detect: Option<String>,
    #[arg(long)]
    pub backend_embed: Option<String>,
    /// Object lexicon used to extract mentions from captions.
    #[arg(long)]
    pub lexicon: Option<String>,
    /// Detections below this confidence are ignored.
    #[arg(long)]
    pub detect_floor: Option<f64>,
    /// Simulated world (JSON file or `default`) serving every backend role
    /// that is not set explicitly.
    #[arg(long)]
    pub world: Option<String>,
}

/// Single-valued guidance and sampling knobs.
#[derive(Debug, Clone, Default, Args)]
pub struct GuidanceArgs {
    /// Weight of the hallucination reward, in [0, 1].
    #[arg(long)]
    pub w: Option<f64>,
    /// Candidates per round.
    #[arg(long)]
    pub k: Option<u32>,
    /// Sentences per round, or `inf` for best-of-k.
    #[arg(long = "T")]
    pub period: Option<SentencePeriod>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PromptArgs {
    /// Instruction text; overrides --preset.
    #[arg(long)]
    pub instruction: Option<String>,
    /// detail, short, grounded or grounded-short.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Image reference passed to the backends.
    #[arg(long)]
    pub image: String,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Write the per-iteration trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the full decode result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub image: String,
    /// Caption to score.
    #[arg(long)]
    pub caption: String,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// JSON lines of {"image_ref", "caption"}.
    #[arg(long)]
    pub captions: PathBuf,
    /// Annotation file with ground-truth objects per image.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the report as a one-row CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Where the examples of a benchmark come from.
#[derive(Debug, Clone, Default, Args)]
pub struct DatasetArgs {
    /// Annotation file listing the images and their ground truth.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of simulated images when no dataset file is given.
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Plain sampling instead of guided decoding.
    #[arg(long)]
    pub baseline: bool,
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the decoded captions as JSON lines.
    #[arg(long)]
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Comma-separated guidance weights.
    #[arg(long, value_delimiter = ',')]
    pub w: Vec<f64>,
    /// Comma-separated candidate counts.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<u32>,
    /// Comma-separated sentence periods (`inf` allowed).
    #[arg(long = "T", value_delimiter = ',')]
    pub period: Vec<SentencePeriod>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// World description (JSON); the built-in world when omitted.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// Annotation file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the world description used.
    #[arg(long)]
    pub world_out: Option<PathBuf>,
}
