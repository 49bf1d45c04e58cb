//! Backend selection from URL-like specs. `mock:<name>` picks an in-process
//! mock, `http(s)://...` a remote service.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use super::{
    BackendConfig, BackendError, BackendKind, CallLog, ChatBackend, DirReferenceIndex, HttpChat, HttpImage,
    HttpScorer, HttpSpeech, ImageBackend, MockChat, MockImage, MockScorer, MockSpeech, ReferenceIndex,
    ScorerBackend, SpeechBackend,
};
use crate::model::InstructionRecord;

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("unsupported backend spec {0:?} (expected mock:<name> or http(s)://...)")]
    BadSpec(String),
    #[error("unknown {kind} mock {name:?}")]
    UnknownMock { kind: BackendKind, name: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("reference directory {path}: {source}")]
    References {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Mock(String),
    Http(String),
}

impl FromStr for BackendSpec {
    type Err = ResolveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix("mock:") {
            Ok(BackendSpec::Mock(name.to_string()))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(BackendSpec::Http(s.to_string()))
        } else {
            Err(ResolveError::BadSpec(s.to_string()))
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Mock(name) => write!(f, "mock:{name}"),
            BackendSpec::Http(url) => f.write_str(url),
        }
    }
}

/// Environment variable holding the bearer token for a backend kind.
pub fn token_env_var(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Llm => "MODALGATE_LLM_TOKEN",
        BackendKind::Image => "MODALGATE_IMAGE_TOKEN",
        BackendKind::Speech => "MODALGATE_SPEECH_TOKEN",
        BackendKind::Scorer => "MODALGATE_SCORER_TOKEN",
    }
}

fn http_config(kind: BackendKind, url: &str) -> BackendConfig {
    let mut cfg = BackendConfig::new(kind, url).with_token_from_env(token_env_var(kind));
    if kind == BackendKind::Llm {
        if let Ok(model) = std::env::var("MODALGATE_LLM_MODEL") {
            cfg = cfg.with_model(model);
        }
    }
    cfg
}

/// Everything a router or evaluation run needs, sharing one call log.
#[derive(Clone)]
pub struct BackendSet {
    pub llm: Arc<dyn ChatBackend>,
    pub image: Option<Arc<dyn ImageBackend>>,
    pub speech: Option<Arc<dyn SpeechBackend>>,
    pub scorer: Option<Arc<dyn ScorerBackend>>,
    pub references: Option<Arc<dyn ReferenceIndex>>,
    pub log: Arc<CallLog>,
}

impl BackendSet {
    /// Builds a set from specs. `oracle` feeds `mock:oracle`.
    pub fn resolve(
        llm: &str,
        image: Option<&str>,
        speech: Option<&str>,
        scorer: Option<&str>,
        oracle: &[InstructionRecord],
        references_dir: Option<&Path>,
    ) -> Result<Self, ResolveError> {
        let log = CallLog::new();
        let llm: Arc<dyn ChatBackend> = match llm.parse()? {
            BackendSpec::Mock(name) => {
                let m = match name.as_str() {
                    "oracle" => MockChat::oracle(oracle),
                    "echo" => MockChat::oracle(&[]),
                    "text" => MockChat::always_text("I can only answer in text."),
                    "teacher" => MockChat::teacher(),
                    "garbage" => MockChat::constant("I am not sure how to format that."),
                    _ => {
                        return Err(ResolveError::UnknownMock {
                            kind: BackendKind::Llm,
                            name,
                        })
                    }
                };
                Arc::new(m.with_name(format!("mock:{name}")).with_log(log.clone()))
            }
            BackendSpec::Http(url) => Arc::new(HttpChat::with_log(http_config(BackendKind::Llm, &url), log.clone())?),
        };
        let image: Option<Arc<dyn ImageBackend>> = match image.map(str::parse).transpose()? {
            None => None,
            Some(BackendSpec::Mock(_)) => Some(Arc::new(MockImage::with_log(log.clone()))),
            Some(BackendSpec::Http(url)) => Some(Arc::new(HttpImage::with_log(
                http_config(BackendKind::Image, &url),
                log.clone(),
            )?)),
        };
        let speech: Option<Arc<dyn SpeechBackend>> = match speech.map(str::parse).transpose()? {
            None => None,
            Some(BackendSpec::Mock(_)) => Some(Arc::new(MockSpeech::with_log(log.clone()))),
            Some(BackendSpec::Http(url)) => Some(Arc::new(HttpSpeech::with_log(
                http_config(BackendKind::Speech, &url),
                log.clone(),
            )?)),
        };

        let dir_index = references_dir
            .map(|p| {
                DirReferenceIndex::open(p).map_err(|source| ResolveError::References {
                    path: p.display().to_string(),
                    source,
                })
            })
            .transpose()?;
        let references: Option<Arc<dyn ReferenceIndex>> =
            dir_index.clone().map(|d| Arc::new(d) as Arc<dyn ReferenceIndex>);

        let scorer: Option<Arc<dyn ScorerBackend>> = match scorer.map(str::parse).transpose()? {
            None => None,
            Some(BackendSpec::Mock(name)) => {
                let mut m = if name == "down" {
                    MockScorer::unavailable()
                } else {
                    MockScorer::new()
                };
                if let Some(dir) = &dir_index {
                    m = m.with_references(load_reference_bytes(dir)?);
                }
                Some(Arc::new(m))
            }
            Some(BackendSpec::Http(url)) => Some(Arc::new(HttpScorer::with_log(
                http_config(BackendKind::Scorer, &url),
                log.clone(),
            )?)),
        };
        Ok(Self {
            llm,
            image,
            speech,
            scorer,
            references,
            log,
        })
    }

    /// Mock-only set around the given chat backend.
    pub fn mocks(llm: Arc<dyn ChatBackend>) -> Self {
        let log = CallLog::new();
        Self {
            llm,
            image: Some(Arc::new(MockImage::with_log(log.clone()))),
            speech: Some(Arc::new(MockSpeech::with_log(log.clone()))),
            scorer: Some(Arc::new(MockScorer::new())),
            references: None,
            log,
        }
    }

    pub fn with_references(mut self, ids: HashSet<String>) -> Self {
        self.references = Some(Arc::new(ids));
        self
    }
}

fn load_reference_bytes(dir: &DirReferenceIndex) -> Result<Vec<(String, Vec<u8>)>, ResolveError> {
    let io_err = |source| ResolveError::References {
        path: dir.root.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir.root).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if let (true, Some(stem)) = (path.is_file(), path.file_stem().and_then(|s| s.to_str())) {
            out.push((stem.to_string(), std::fs::read(&path).map_err(io_err)?));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        assert_eq!("mock:oracle".parse::<BackendSpec>().unwrap(), BackendSpec::Mock("oracle".into()));
        assert!(matches!(
            "http://localhost:8000".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http(_)
        ));
        assert!("ftp://x".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn resolve_mocks() {
        let set = BackendSet::resolve("mock:oracle", Some("mock:image"), Some("mock:speech"), None, &[], None)
            .unwrap();
        assert_eq!(set.llm.describe(), "mock:oracle");
        assert!(set.scorer.is_none());
        assert!(matches!(
            BackendSet::resolve("mock:nope", None, None, None, &[], None),
            Err(ResolveError::UnknownMock { .. })
        ));
    }
}
