use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use modalgate_core::model::{Modality, WireProfile};
use modalgate_core::router::Policy;
use serde::{Deserialize, Serialize};

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse()
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse::<Modality>().map_err(|e| e.to_string())
}

fn parse_wire(s: &str) -> Result<WireProfile, String> {
    match s {
        "speech" => Ok(WireProfile::Speech),
        "audio" => Ok(WireProfile::Audio),
        other => Err(format!("unknown wire profile {other:?} (expected speech or audio)")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "modalgate", version, about = "Multi-modal-output gateway for text-only chat LLMs")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Flat JSON file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log filter for stderr (overridden by MODALGATE_LOG).
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP gateway.
    Serve(ServeArgs),
    /// Route one instruction and print the result.
    Respond(RespondArgs),
    /// Generate a single-route corpus from captions, or mix route corpora.
    Datagen(DatagenArgs),
    /// Score a system on a validation corpus.
    Eval(EvalArgs),
    /// Verb/noun statistics for a corpus.
    Stats(StatsArgs),
    /// Compare evaluation reports side by side.
    Compare(CompareArgs),
}

/// Field names match the service config file keys.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Chat LLM: mock:<name> or http(s)://...
    #[arg(long, value_name = "URL")]
    pub llm: Option<String>,
    #[arg(long, value_name = "URL")]
    pub image: Option<String>,
    #[arg(long, value_name = "URL")]
    pub speech: Option<String>,
    #[arg(long, value_name = "URL")]
    pub scorer: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub references: Option<PathBuf>,
    /// Corpus answered by mock:oracle.
    #[arg(long, value_name = "FILE")]
    pub oracle_corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    #[arg(long)]
    pub max_reasks: Option<u32>,
    #[arg(long, value_name = "DIR")]
    pub artifact_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub session_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub eval_dir: Option<PathBuf>,
    #[arg(long, value_name = "SECS")]
    pub respond_timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RespondArgs {
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long, value_name = "URL")]
    pub llm: Option<String>,
    #[arg(long, value_name = "URL")]
    pub image: Option<String>,
    #[arg(long, value_name = "URL")]
    pub speech: Option<String>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,
    /// Corpus answered by mock:oracle.
    #[arg(long, value_name = "FILE")]
    pub oracle_corpus: Option<PathBuf>,
    /// Prior turns as JSON lines of {"role","text"}.
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    #[arg(long)]
    pub max_reasks: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<u32>,
    /// Override the digest-derived image seed.
    #[arg(long)]
    pub image_seed: Option<u64>,
    /// Fail instead of falling back to text on unparseable output.
    #[arg(long)]
    pub no_fallback: bool,
    /// Also store the artifact under DIR as {sha256}.{ext}.
    #[arg(long, value_name = "DIR")]
    pub artifact_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DatagenArgs {
    /// Route to generate: image or speech.
    #[arg(long, value_parser = parse_modality)]
    pub modality: Option<Modality>,
    /// Caption pool: text lines or JSON lines with "caption".
    #[arg(long, value_name = "FILE")]
    pub captions: Option<PathBuf>,
    /// Seed instructions as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub seeds: Option<PathBuf>,
    /// Records to keep (generation) or total size (mixing).
    #[arg(long, value_name = "N")]
    pub target: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Teacher LLM: mock:teacher or http(s)://...
    #[arg(long, value_name = "URL")]
    pub teacher: Option<String>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Minimum spacing between teacher calls.
    #[arg(long, value_name = "MS")]
    pub min_interval_ms: Option<u64>,
    /// Filter lexicon file (JSON).
    #[arg(long, value_name = "FILE")]
    pub filters: Option<PathBuf>,
    /// Spelling of the speech route in written corpora.
    #[arg(long, value_parser = parse_wire)]
    pub wire: Option<WireProfile>,
    /// Mix route corpora into train/val splits instead of generating.
    #[arg(long)]
    pub mix: bool,
    #[arg(long, value_name = "FILE")]
    pub text_corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub image_corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub speech_corpus: Option<PathBuf>,
    /// Route weights as text,image,speech; normalized to sum to 1.
    #[arg(long, value_name = "T,I,S")]
    pub ratios: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Generation manifests whose provenance the mixed manifest carries.
    #[arg(long, value_name = "FILE")]
    #[serde(default)]
    pub upstream: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,
    #[arg(long, value_name = "URL")]
    pub llm: Option<String>,
    #[arg(long, value_name = "URL")]
    pub image: Option<String>,
    #[arg(long, value_name = "URL")]
    pub speech: Option<String>,
    #[arg(long, value_name = "URL")]
    pub scorer: Option<String>,
    /// Reference images named {image_id}.{ext}, for FID.
    #[arg(long, value_name = "DIR")]
    pub references: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Defaults to OUT/cache.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Reuse cached per-item results.
    #[arg(long)]
    pub resume: bool,
    /// System name in the report.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Count text-ground items in modality accuracy.
    #[arg(long)]
    pub include_text_ground: bool,
    /// Score gated-out items as zero instead of excluding them.
    #[arg(long)]
    pub penalize_mismatch: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<u32>,
    #[arg(long)]
    pub max_reasks: Option<u32>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Verb lexicon, one lemma per line.
    #[arg(long, value_name = "FILE")]
    pub verbs: Option<PathBuf>,
    /// Noun lexicon, one lemma per line.
    #[arg(long, value_name = "FILE")]
    pub nouns: Option<PathBuf>,
    /// Keep only the N most frequent verbs.
    #[arg(long, value_name = "N")]
    pub top: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// report.json files or directories containing one.
    #[arg(value_name = "REPORT")]
    #[serde(default)]
    pub reports: Vec<PathBuf>,
    /// Print a Markdown table instead of JSON.
    #[arg(long)]
    pub markdown: bool,
}
