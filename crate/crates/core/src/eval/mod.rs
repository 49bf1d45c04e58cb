//! Benchmark runner: routes every validation record, scores what passes the
//! eligibility gate and writes a report with a per-item ledger.

mod corpus;
mod report;
mod spec;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use spec::EvalSpec;
pub use corpus::{default_item_id, load_eval_corpus, parse_eval_corpus, EvalItem, Score};
pub use report::{
    aggregate, compare_systems, read_report, write_report, AggregateOptions, Comparison, ComparisonRow, EvalReport,
    FidOutcome, LedgerEntry, COLUMNS, MISSING_CELL, REPORT_SCHEMA_VERSION,
};

use crate::backends::{await_fid, collect_fid_pair, BackendSet, MediaArtifact};
use crate::clock::{Clock, SystemClock};
use crate::digest::sha256_hex;
use crate::metrics::{bleu, qa_score};
use crate::model::Modality;
use crate::prompting::ConversationHistory;
use crate::router::{Policy, RoutedResult, Router, RouterConfig};

pub const DEFAULT_PARALLELISM: usize = 4;
const FID_POLL_INTERVAL: Duration = Duration::from_millis(200);
const FID_MAX_POLLS: u32 = 3000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corpus { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Report { path: String, message: String },
    #[error("report schema {found} from {system:?} does not match {expected}")]
    SchemaMismatch { expected: u32, found: u32, system: String },
    #[error("invalid job: {0}")]
    InvalidJob(String),
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// The system under test. Everything except `name` feeds the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemDescriptor {
    pub name: String,
    pub policy: Policy,
    pub llm: String,
    pub image: Option<String>,
    pub speech: Option<String>,
    pub scorer: Option<String>,
    pub references: Option<String>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub max_reasks: u32,
    pub rng_seed: u64,
}

impl SystemDescriptor {
    pub fn new(name: impl Into<String>, policy: Policy, llm: impl Into<String>) -> Self {
        let defaults = RouterConfig::default();
        Self {
            name: name.into(),
            policy,
            llm: llm.into(),
            image: None,
            speech: None,
            scorer: None,
            references: None,
            temperature: defaults.temperature,
            max_new_tokens: defaults.max_new_tokens,
            max_reasks: defaults.max_reasks,
            rng_seed: 0,
        }
    }

    pub fn digest(&self) -> String {
        let keyed = Self {
            name: String::new(),
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&keyed).expect("serializable").as_bytes())[..16].to_string()
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            policy: self.policy,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            fallback_to_text: true,
            max_reasks: self.max_reasks,
            seed_salt: Some(self.rng_seed),
        }
    }
}

/// Everything computed for one record; enough to rebuild the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub config_digest: String,
    pub ground: Modality,
    pub predicted: Option<Modality>,
    pub fell_back_to_text: bool,
    pub llm_calls: u32,
    pub image_id: Option<String>,
    pub routed: Option<RoutedResult>,
    pub clip: Option<Score>,
    pub bleu: Option<Score>,
    pub qa: Option<Score>,
    pub error: Option<String>,
    pub wall_ms: u64,
    /// Transient failures are not cached so a resumed run retries them.
    #[serde(skip)]
    pub retryable: bool,
}

impl ItemResult {
    fn artifact(&self) -> Option<&MediaArtifact> {
        self.routed.as_ref().and_then(|r| r.artifact.as_ref())
    }
}

pub struct EvalJob {
    pub corpus: PathBuf,
    pub system: SystemDescriptor,
    pub backends: BackendSet,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    pub include_text_ground: bool,
    pub penalize_mismatch: bool,
    pub clock: Arc<dyn Clock>,
}

impl EvalJob {
    pub fn new(corpus: impl Into<PathBuf>, system: SystemDescriptor, backends: BackendSet) -> Self {
        Self {
            corpus: corpus.into(),
            system,
            backends,
            parallelism: DEFAULT_PARALLELISM,
            cache_dir: None,
            out_dir: None,
            resume: false,
            include_text_ground: false,
            penalize_mismatch: false,
            clock: Arc::new(SystemClock::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub ledger: Vec<LedgerEntry>,
    pub items: Vec<ItemResult>,
    /// Items taken from the cache rather than recomputed.
    pub cached: usize,
}

fn cache_name(id: &str, digest: &str) -> String {
    let safe = !id.is_empty() && id.len() <= 100 && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    let stem = if safe && !id.starts_with('.') {
        id.to_string()
    } else {
        format!("h{}", &sha256_hex(id.as_bytes())[..24])
    };
    format!("{stem}-{digest}.json")
}

/// Writes via a temporary file and rename so readers never see a partial
/// file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| EvalError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| EvalError::io(path, e))
}

fn read_cached(dir: &Path, id: &str, digest: &str) -> Option<ItemResult> {
    let text = std::fs::read_to_string(dir.join(cache_name(id, digest))).ok()?;
    let item: ItemResult = serde_json::from_str(&text).ok()?;
    (item.id == id && item.config_digest == digest).then_some(item)
}

async fn evaluate_item(item: &EvalItem, router: &Router, backends: &BackendSet, digest: &str, clock: &dyn Clock) -> ItemResult {
    let t0 = clock.monotonic();
    let ground = item.ground();
    let mut result = ItemResult {
        id: item.id.clone(),
        config_digest: digest.to_string(),
        ground,
        predicted: None,
        fell_back_to_text: false,
        llm_calls: 0,
        image_id: item.record.image_id.clone(),
        routed: None,
        clip: None,
        bleu: None,
        qa: None,
        error: None,
        wall_ms: 0,
        retryable: false,
    };
    let gated_score = |predicted: Option<Modality>| (predicted != Some(ground)).then_some(Score::Gated);

    match router.route(&item.record.instruction, &ConversationHistory::default()).await {
        Ok(routed) => {
            result.predicted = Some(routed.modality);
            result.fell_back_to_text = routed.trace.fell_back_to_text();
            result.llm_calls = routed.trace.llm_calls;
            result.routed = Some(routed);
        }
        Err(e) => {
            result.predicted = e.trace.parse_outcome.as_ref().and_then(|p| p.modality());
            result.llm_calls = e.trace.llm_calls;
            result.retryable = matches!(&e.kind, crate::router::RouteErrorKind::Backend { error, .. } if error.is_transient());
            result.error = Some(e.to_string());
        }
    }
    let response = result.routed.as_ref().map(|r| r.response().to_string());
    let reference = item.record.output.response();

    match ground {
        Modality::Image => {
            result.clip = Some(match (gated_score(result.predicted), &backends.scorer, result.artifact()) {
                (Some(g), _, _) => g,
                (None, None, _) => Score::Missing {
                    reason: "no scorer configured".into(),
                },
                (None, Some(_), None) => Score::Missing {
                    reason: "no image artifact".into(),
                },
                (None, Some(scorer), Some(artifact)) => match scorer.score_clip(artifact, reference).await {
                    Ok(value) => Score::Value { value },
                    Err(e) => {
                        result.retryable |= e.is_transient();
                        Score::Missing {
                            reason: format!("scorer error: {e}"),
                        }
                    }
                },
            });
        }
        Modality::Speech => {
            result.bleu = Some(match (gated_score(result.predicted), &response) {
                (Some(g), _) => g,
                (None, None) => Score::Missing {
                    reason: "no response".into(),
                },
                (None, Some(r)) => match bleu(r, &[reference]) {
                    Ok(value) => Score::Value { value },
                    Err(e) => Score::Missing { reason: e.to_string() },
                },
            });
        }
        Modality::Text => {
            if let Some(qa) = &item.qa {
                result.qa = Some(match (gated_score(result.predicted), &response) {
                    (Some(g), _) => g,
                    (None, None) => Score::Missing {
                        reason: "no response".into(),
                    },
                    (None, Some(r)) => match qa_score(qa, r) {
                        Ok(correct) => Score::Value {
                            value: if correct { 1.0 } else { 0.0 },
                        },
                        Err(e) => Score::Missing { reason: e.to_string() },
                    },
                });
            }
        }
    }
    result.wall_ms = (clock.monotonic() - t0).as_millis() as u64;
    result
}

#[derive(Serialize, Deserialize)]
struct CachedFid {
    key: String,
    outcome: FidOutcome,
}

fn fid_batch(items: &[ItemResult]) -> Vec<(&ItemResult, &MediaArtifact, &str)> {
    let mut batch: Vec<_> = items
        .iter()
        .filter(|i| i.ground == Modality::Image && i.predicted == Some(Modality::Image))
        .filter_map(|i| Some((i, i.artifact()?, i.image_id.as_deref()?)))
        .collect();
    batch.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    batch
}

fn fid_key(items: &[ItemResult]) -> String {
    let lines: String = fid_batch(items)
        .iter()
        .map(|(i, a, r)| format!("{}:{}:{}\n", i.id, a.content_hash, r))
        .collect();
    sha256_hex(lines.as_bytes())
}

fn fid_cache_path(dir: &Path, digest: &str) -> PathBuf {
    dir.join(format!("fid-{digest}.json"))
}

fn read_cached_fid(dir: &Path, digest: &str, key: &str) -> Option<FidOutcome> {
    let text = std::fs::read_to_string(fid_cache_path(dir, digest)).ok()?;
    let cached: CachedFid = serde_json::from_str(&text).ok()?;
    (cached.key == key).then_some(cached.outcome)
}

async fn compute_fid(items: &[ItemResult], backends: &BackendSet, cache_dir: Option<&Path>, digest: &str) -> Result<FidOutcome, EvalError> {
    let key = fid_key(items);
    if let Some(cached @ FidOutcome::Value { .. }) = cache_dir.and_then(|d| read_cached_fid(d, digest, &key)) {
        return Ok(cached);
    }
    let batch = fid_batch(items);
    let outcome = match (&backends.scorer, &backends.references) {
        (Some(scorer), Some(refs)) if !batch.is_empty() => {
            let pairs: Vec<(MediaArtifact, String)> =
                batch.into_iter().map(|(_, a, r)| (a.clone(), r.to_string())).collect();
            match collect_fid_pair(scorer.as_ref(), refs.as_ref(), &pairs).await {
                Err(e) => FidOutcome::Absent {
                    reason: format!("FID submission failed: {e}"),
                },
                Ok(handle) => match await_fid(scorer.as_ref(), &handle, FID_POLL_INTERVAL, FID_MAX_POLLS).await {
                    Ok(fid) => FidOutcome::Value { fid },
                    Err(e) => FidOutcome::Absent {
                        reason: format!("FID job failed: {e}"),
                    },
                },
            }
        }
        (Some(_), Some(_)) => FidOutcome::Absent {
            reason: "no gated image items with artifacts".into(),
        },
        _ => FidOutcome::Absent {
            reason: "FID needs a scorer backend and a reference image store".into(),
        },
    };
    if let Some(dir) = cache_dir {
        let cached = CachedFid { key, outcome: outcome.clone() };
        write_atomic(&fid_cache_path(dir, digest), &serde_json::to_vec(&cached).expect("serializable"))?;
    }
    Ok(outcome)
}

/// Runs the benchmark. Per-item failures are recorded in the ledger; only
/// corpus and file errors abort.
pub async fn run_eval(job: &EvalJob) -> Result<EvalOutput, EvalError> {
    if job.parallelism == 0 {
        return Err(EvalError::InvalidJob("parallelism must be at least 1".into()));
    }
    let corpus_bytes = std::fs::read(&job.corpus).map_err(|e| EvalError::io(&job.corpus, e))?;
    let corpus_text = String::from_utf8(corpus_bytes).map_err(|e| EvalError::Corpus {
        path: job.corpus.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let items = parse_eval_corpus(&corpus_text, &job.corpus.display().to_string())?;
    let corpus_digest = sha256_hex(corpus_text.as_bytes());
    let digest = job.system.digest();
    let cache_dir = job
        .cache_dir
        .clone()
        .or_else(|| job.out_dir.as_ref().map(|d| d.join("cache")));
    if let Some(dir) = &cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    }

    let mut done: HashMap<String, ItemResult> = HashMap::new();
    if let (true, Some(dir)) = (job.resume, &cache_dir) {
        for item in &items {
            if let Some(r) = read_cached(dir, &item.id, &digest) {
                done.insert(item.id.clone(), r);
            }
        }
    }
    let cached = done.len();
    tracing::info!(items = items.len(), cached, "starting evaluation");

    let router = Router::from_backends(&job.backends)
        .with_config(job.system.router_config())
        .with_clock(job.clock.clone());
    // futures are built up front so the stream type carries no closure; keeps run_eval spawnable
    let pending: Vec<_> = items
        .iter()
        .filter(|i| !done.contains_key(&i.id))
        .map(|item| evaluate_item(item, &router, &job.backends, &digest, job.clock.as_ref()))
        .collect();
    let mut results = stream::iter(pending).buffer_unordered(job.parallelism);
    while let Some(result) = results.next().await {
        if let (Some(dir), false) = (&cache_dir, result.retryable) {
            let bytes = serde_json::to_vec(&result).expect("serializable");
            write_atomic(&dir.join(cache_name(&result.id, &digest)), &bytes)?;
        }
        done.insert(result.id.clone(), result);
    }
    drop(results);

    let mut all: Vec<ItemResult> = items.iter().filter_map(|i| done.remove(&i.id)).collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let fid = compute_fid(&all, &job.backends, cache_dir.as_deref(), &digest).await?;
    let opts = AggregateOptions {
        include_text_ground: job.include_text_ground,
        penalize_mismatch: job.penalize_mismatch,
    };
    let (report, ledger) = aggregate(&all, &fid, &job.system, &corpus_digest, &opts);
    if let Some(dir) = &job.out_dir {
        write_report(dir, &report, &ledger)?;
    }
    Ok(EvalOutput {
        report,
        ledger,
        items: all,
        cached,
    })
}

/// Rebuilds a report purely from cached item files.
pub fn report_from_cache(
    corpus: &Path,
    system: &SystemDescriptor,
    cache_dir: &Path,
    opts: &AggregateOptions,
) -> Result<(EvalReport, Vec<LedgerEntry>), EvalError> {
    let text = std::fs::read_to_string(corpus).map_err(|e| EvalError::io(corpus, e))?;
    let items = parse_eval_corpus(&text, &corpus.display().to_string())?;
    let digest = system.digest();
    let mut results = Vec::with_capacity(items.len());
    for item in &items {
        results.push(read_cached(cache_dir, &item.id, &digest).ok_or_else(|| {
            EvalError::InvalidJob(format!("no cached result for item {:?}", item.id))
        })?);
    }
    let fid = read_cached_fid(cache_dir, &digest, &fid_key(&results))
        .ok_or_else(|| EvalError::InvalidJob("no cached FID outcome for this item set".into()))?;
    Ok(aggregate(&results, &fid, system, &sha256_hex(text.as_bytes()), opts))
}
