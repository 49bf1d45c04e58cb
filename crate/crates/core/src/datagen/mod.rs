//! Instruction dataset generation: caption sampling, teacher prompting,
//! filtering, record construction, mixing, splits and diversity stats.

mod filter;
mod mix;
mod pool;
mod stats;
mod teacher;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{filter_instructions, jaccard, normalize, trigrams, FilterConfig, FilterReason, FilterReport};
pub use mix::{apportion, mix_dataset, split_dataset, MixRatios, RouteCounts};
pub use pool::{CaptionPool, SeedInstruction, SeedStore};
pub use stats::{root_verb_noun, verb_noun_stats, verb_noun_stats_with, Lexicon, NounCount, VerbNounTable, VerbRow, NONE_BUCKET};
pub use teacher::{parse_teacher_output, run_generation, CaptionInstruction, GenBatch, GenConfig, TeacherParse};

use crate::backends::ChatBackend;
use crate::model::{InstructionRecord, Modality, RecordSource, StructuredResponse, WireProfile};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("caption pool is empty")]
    EmptyPool,
    #[error("caption pools feed image or speech routes, not text")]
    TextPool,
    #[error("seed {0} targets text; seeds must target image or speech")]
    TextSeed(String),
    #[error("requested {requested} captions but only {remaining} remain")]
    PoolExhausted { requested: usize, remaining: usize },
    #[error("need at least 3 {modality} seeds, have {have}")]
    NotEnoughSeeds { modality: Modality, have: usize },
    #[error("{route} source has {available} records, {needed} needed")]
    InsufficientSource {
        route: Modality,
        needed: usize,
        available: usize,
    },
    #[error("{expected} source contains a record of another modality: {instruction:?}")]
    WrongRoute { expected: Modality, instruction: String },
    #[error("mix ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("empty caption or instruction")]
    EmptyField,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl DatagenError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatagenError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A teacher record: the caption becomes the response unchanged apart from
/// outer whitespace.
pub fn build_record(caption: &str, instruction: &str, modality: Modality) -> Result<InstructionRecord, DatagenError> {
    let (caption, instruction) = (caption.trim(), instruction.trim());
    if caption.is_empty() || instruction.is_empty() {
        return Err(DatagenError::EmptyField);
    }
    let output = StructuredResponse::new(modality, caption).map_err(|_| DatagenError::EmptyField)?;
    InstructionRecord::new(instruction, output, RecordSource::Teacher).map_err(|_| DatagenError::EmptyField)
}

/// Training settings carried through to whoever fine-tunes on the corpus.
/// Values are opaque strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingEcho {
    pub base_model: String,
    pub adapter: String,
    pub optimizer: String,
    pub learning_rate: String,
    pub epochs: String,
    pub per_device_batch_size: String,
    pub gradient_accumulation_steps: String,
}

impl Default for TrainingEcho {
    fn default() -> Self {
        Self {
            base_model: "Llama-2-7b".into(),
            adapter: "LoRA".into(),
            optimizer: "AdamW".into(),
            learning_rate: "3e-4".into(),
            epochs: "3".into(),
            per_device_batch_size: "4".into(),
            gradient_accumulation_steps: "8".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSource {
    pub modality: Modality,
    pub source_name: String,
    pub pool_size: usize,
    pub captions_used: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub batches: usize,
    pub failed_batches: usize,
    pub captions_sent: usize,
    pub parsed: usize,
    pub dropped: usize,
}

impl GenerationSummary {
    fn of(batches: &[GenBatch]) -> Self {
        Self {
            batches: batches.len(),
            failed_batches: batches.iter().filter(|b| b.error.is_some()).count(),
            captions_sent: batches.iter().map(|b| b.captions.len()).sum(),
            parsed: batches.iter().map(|b| b.parsed.len()).sum(),
            dropped: batches.iter().map(|b| b.dropped.len()).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
}

/// Provenance and counts for one corpus. Contains nothing time-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub target_total: usize,
    pub totals: RouteCounts,
    pub mix_ratios: MixRatios,
    pub rng_seed: u64,
    pub caption_sources: Vec<CaptionSource>,
    pub teacher_model: Option<String>,
    pub generation: BTreeMap<Modality, GenerationSummary>,
    pub filter_reports: BTreeMap<Modality, FilterReport>,
    pub splits: Option<SplitSizes>,
    pub training: TrainingEcho,
}

pub struct GenerateJob {
    pub pool: CaptionPool,
    pub seeds: SeedStore,
    pub teacher: Arc<dyn ChatBackend>,
    pub gen: GenConfig,
    pub filter: FilterConfig,
    /// Stop once this many records survive filtering; `None` uses the whole
    /// pool.
    pub target: Option<usize>,
    pub rng_seed: u64,
    pub training: TrainingEcho,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub records: Vec<InstructionRecord>,
    pub batches: Vec<GenBatch>,
    pub filter_report: FilterReport,
    pub manifest: DatasetManifest,
    pub stats: VerbNounTable,
}

fn single_route_ratios(m: Modality) -> MixRatios {
    let mut a = [0.0; 3];
    a[m.index()] = 1.0;
    MixRatios {
        text: a[0],
        image: a[1],
        speech: a[2],
    }
}

/// Runs teacher batches until `target` records survive filtering or the pool
/// runs dry.
pub async fn generate_corpus(mut job: GenerateJob) -> Result<GenerateOutput, DatagenError> {
    let modality = job.pool.modality();
    let mut batches: Vec<GenBatch> = Vec::new();
    let (mut records, mut report) = (Vec::new(), FilterReport::default());
    loop {
        let have = records.len();
        if job.target.is_some_and(|t| have >= t) || job.pool.remaining() == 0 {
            break;
        }
        let gen = GenConfig {
            max_batches: job
                .target
                .map(|t| (t - have).div_ceil(job.gen.batch_size.max(1)).max(1)),
            ..job.gen.clone()
        };
        let round_seed = job.rng_seed.wrapping_add(batches.len() as u64);
        let mut round = run_generation(&mut job.pool, &job.seeds, job.teacher.clone(), &gen, round_seed).await?;
        let offset = batches.len();
        for b in &mut round {
            b.index += offset;
        }
        batches.extend(round);
        let pairs: Vec<CaptionInstruction> = batches.iter().flat_map(|b| b.parsed.iter().cloned()).collect();
        (records, report) = filter_instructions(&pairs, modality, &job.filter);
    }
    if let Some(t) = job.target {
        records.truncate(t);
    }
    let totals = RouteCounts::of(&records);
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        target_total: job.target.unwrap_or(records.len()),
        totals,
        mix_ratios: single_route_ratios(modality),
        rng_seed: job.rng_seed,
        caption_sources: vec![CaptionSource {
            modality,
            source_name: job.pool.source_name().to_string(),
            pool_size: job.pool.len(),
            captions_used: job.pool.len() - job.pool.remaining(),
        }],
        teacher_model: Some(job.teacher.describe()),
        generation: BTreeMap::from([(modality, GenerationSummary::of(&batches))]),
        filter_reports: BTreeMap::from([(modality, report.clone())]),
        splits: None,
        training: job.training,
    };
    let stats = verb_noun_stats(&records);
    Ok(GenerateOutput {
        records,
        batches,
        filter_report: report,
        manifest,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct MixOutput {
    pub train: Vec<InstructionRecord>,
    pub val: Vec<InstructionRecord>,
    pub manifest: DatasetManifest,
    pub stats: VerbNounTable,
}

/// Mixes three route corpora and splits the result. `upstream` manifests
/// from generation runs contribute their provenance.
pub fn mix_corpora(
    sources: [&[InstructionRecord]; 3],
    target_total: usize,
    ratios: &MixRatios,
    val_fraction: f64,
    rng_seed: u64,
    upstream: &[DatasetManifest],
    training: TrainingEcho,
) -> Result<MixOutput, DatagenError> {
    let (mixed, totals) = mix_dataset(sources[0], sources[1], sources[2], target_total, ratios, rng_seed)?;
    let (train, val) = split_dataset(&mixed, val_fraction, rng_seed)?;
    let mut manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        target_total,
        totals,
        mix_ratios: *ratios,
        rng_seed,
        caption_sources: Vec::new(),
        teacher_model: None,
        generation: BTreeMap::new(),
        filter_reports: BTreeMap::new(),
        splits: Some(SplitSizes {
            train: train.len(),
            val: val.len(),
        }),
        training,
    };
    for up in upstream {
        manifest.caption_sources.extend(up.caption_sources.iter().cloned());
        manifest.generation.extend(up.generation.clone());
        manifest.filter_reports.extend(up.filter_reports.clone());
        if manifest.teacher_model.is_none() {
            manifest.teacher_model = up.teacher_model.clone();
        }
    }
    let stats = verb_noun_stats(&mixed);
    Ok(MixOutput {
        train,
        val,
        manifest,
        stats,
    })
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatagenError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DatagenError::io(path, e))
}

pub fn write_corpus_file(path: &Path, records: &[InstructionRecord], profile: WireProfile) -> Result<(), DatagenError> {
    let file = std::fs::File::create(path).map_err(|e| DatagenError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    crate::model::write_corpus(&mut w, records, profile).map_err(|e| DatagenError::io(path, e))?;
    w.flush().map_err(|e| DatagenError::io(path, e))
}

impl GenerateOutput {
    /// `corpus.jsonl`, `manifest.json`, `stats.json` and `batches.jsonl`.
    pub fn write_to(&self, dir: &Path, profile: WireProfile) -> Result<(), DatagenError> {
        std::fs::create_dir_all(dir).map_err(|e| DatagenError::io(dir, e))?;
        write_corpus_file(&dir.join("corpus.jsonl"), &self.records, profile)?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_json(&dir.join("stats.json"), &self.stats)?;
        let path = dir.join("batches.jsonl");
        let mut lines = String::new();
        for b in &self.batches {
            lines.push_str(&serde_json::to_string(b).expect("serializable"));
            lines.push('\n');
        }
        std::fs::write(&path, lines).map_err(|e| DatagenError::io(&path, e))
    }
}

impl MixOutput {
    /// `train.jsonl`, `val.jsonl`, `manifest.json` and `stats.json`.
    pub fn write_to(&self, dir: &Path, profile: WireProfile) -> Result<(), DatagenError> {
        std::fs::create_dir_all(dir).map_err(|e| DatagenError::io(dir, e))?;
        write_corpus_file(&dir.join("train.jsonl"), &self.train, profile)?;
        write_corpus_file(&dir.join("val.jsonl"), &self.val, profile)?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_json(&dir.join("stats.json"), &self.stats)
    }
}
