//! Declarative form of an evaluation run, as accepted over HTTP or built from
//! command-line flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{load_eval_corpus, EvalError, EvalJob, SystemDescriptor, DEFAULT_PARALLELISM};
use crate::backends::{BackendSet, BackendSpec};
use crate::router::{Policy, RouterConfig};

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Caller-chosen id for service jobs; the CLI ignores it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    pub corpus: PathBuf,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub policy: Policy,
    pub llm: String,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub speech: Option<String>,
    #[serde(default)]
    pub scorer: Option<String>,
    /// Directory of reference images named `{image_id}.{ext}`.
    #[serde(default)]
    pub references: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub resume: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub include_text_ground: bool,
    #[serde(default)]
    pub penalize_mismatch: bool,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_new_tokens: Option<u32>,
    #[serde(default)]
    pub max_reasks: Option<u32>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl EvalSpec {
    pub fn new(corpus: impl Into<PathBuf>, llm: impl Into<String>) -> Self {
        Self {
            job_id: None,
            corpus: corpus.into(),
            name: None,
            policy: Policy::default(),
            llm: llm.into(),
            image: None,
            speech: None,
            scorer: None,
            references: None,
            out_dir: None,
            cache_dir: None,
            resume: false,
            parallelism: DEFAULT_PARALLELISM,
            include_text_ground: false,
            penalize_mismatch: false,
            temperature: None,
            max_new_tokens: None,
            max_reasks: None,
            rng_seed: 0,
        }
    }

    pub fn system(&self) -> SystemDescriptor {
        let defaults = RouterConfig::default();
        let name = self.name.clone().unwrap_or_else(|| format!("{}:{}", self.policy, self.llm));
        let mut s = SystemDescriptor::new(name, self.policy, self.llm.clone());
        s.image = self.image.clone();
        s.speech = self.speech.clone();
        s.scorer = self.scorer.clone();
        s.references = self.references.as_ref().map(|p| p.display().to_string());
        s.temperature = self.temperature.unwrap_or(defaults.temperature);
        s.max_new_tokens = self.max_new_tokens.unwrap_or(defaults.max_new_tokens);
        s.max_reasks = self.max_reasks.unwrap_or(defaults.max_reasks);
        s.rng_seed = self.rng_seed;
        s
    }

    /// Resolves backends and builds the job. `mock:oracle` is fed the corpus
    /// itself.
    pub fn into_job(&self) -> Result<EvalJob, EvalError> {
        if self.parallelism == 0 {
            return Err(EvalError::InvalidJob("parallelism must be at least 1".into()));
        }
        let oracle = match self.llm.parse::<BackendSpec>() {
            Ok(BackendSpec::Mock(name)) if name == "oracle" => {
                load_eval_corpus(&self.corpus)?.into_iter().map(|i| i.record).collect()
            }
            _ => Vec::new(),
        };
        let backends = BackendSet::resolve(
            &self.llm,
            self.image.as_deref(),
            self.speech.as_deref(),
            self.scorer.as_deref(),
            &oracle,
            self.references.as_deref(),
        )
        .map_err(|e| EvalError::InvalidJob(e.to_string()))?;
        let mut job = EvalJob::new(&self.corpus, self.system(), backends);
        job.parallelism = self.parallelism;
        job.cache_dir = self.cache_dir.clone();
        job.out_dir = self.out_dir.clone();
        job.resume = self.resume;
        job.include_text_ground = self.include_text_ground;
        job.penalize_mismatch = self.penalize_mismatch;
        Ok(job)
    }
}
