//! Client contracts for the four external services (chat LLM, text→image,
//! text→speech, scorer), their HTTP implementations, and deterministic
//! in-process mocks.

mod http;
mod mock;
mod resolve;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

pub use http::{HttpChat, HttpImage, HttpScorer, HttpSpeech};
pub use mock::{make_mock, overlap_score, render_echo_wav, render_hash_image, MockBackend, MockChat, MockImage, MockKind, MockScorer, MockSpeech, MOCK_IMAGE_SIZE};
pub use resolve::{token_env_var, BackendSet, BackendSpec, ResolveError};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 256;
pub const DEFAULT_IMAGE_SIZE: u32 = 512;
pub const MAX_RETRIES_LIMIT: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote refused request with HTTP {status}: {body}")]
    RemoteRefusal { status: u16, body: String },
    #[error("undecodable payload: {0}")]
    BadPayload(String),
    #[error("scorer error: {0}")]
    ScorerError(String),
    #[error("missing reference images: {}", .0.join(", "))]
    MissingReference(Vec<String>),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("mock script exhausted")]
    ScriptExhausted,
}

impl BackendError {
    /// Errors worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Llm,
    Image,
    Speech,
    Scorer,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Llm => "llm",
            BackendKind::Image => "image",
            BackendKind::Speech => "speech",
            BackendKind::Scorer => "scorer",
        })
    }
}

/// Bearer token. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretToken(String);

impl SecretToken {
    pub fn new(token: impl Into<String>) -> Self {
        Self(token.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for SecretToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretToken(***)")
    }
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    kind: BackendKind,
    base_url: String,
    model: Option<String>,
    auth_token: Option<SecretToken>,
    timeout: Duration,
    max_retries: u32,
    retry_backoff: Duration,
}

impl BackendConfig {
    pub fn new(kind: BackendKind, base_url: impl Into<String>) -> Self {
        Self {
            kind,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: None,
            auth_token: None,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            retry_backoff: Duration::from_millis(250),
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn with_token(mut self, token: SecretToken) -> Self {
        self.auth_token = Some(token);
        self
    }

    /// Reads the token from `var` when it is set and non-empty.
    pub fn with_token_from_env(mut self, var: &str) -> Self {
        if let Ok(t) = std::env::var(var) {
            if !t.is_empty() {
                self.auth_token = Some(SecretToken::new(t));
            }
        }
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.retry_backoff = backoff;
        self
    }

    pub fn validate(&self, expected: BackendKind) -> Result<(), BackendError> {
        if self.kind != expected {
            return Err(BackendError::Config(format!(
                "expected a {expected} backend, got {}",
                self.kind
            )));
        }
        if self.timeout.is_zero() {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(BackendError::Config(format!(
                "max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.max_retries
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }
    pub fn base_url(&self) -> &str {
        &self.base_url
    }
    pub fn model(&self) -> Option<&str> {
        self.model.as_deref()
    }
    pub fn auth_token(&self) -> Option<&SecretToken> {
        self.auth_token.as_ref()
    }
    pub fn timeout(&self) -> Duration {
        self.timeout
    }
    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }
    pub fn retry_backoff(&self) -> Duration {
        self.retry_backoff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Precondition(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::Precondition("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    Audio,
}

impl MediaKind {
    fn mime_prefix(self) -> &'static str {
        match self {
            MediaKind::Image => "image/",
            MediaKind::Audio => "audio/",
        }
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let raw = String::deserialize(d)?;
        STANDARD.decode(raw).map_err(serde::de::Error::custom)
    }
}

/// A generated image or audio clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaArtifact {
    pub media_kind: MediaKind,
    #[serde(rename = "bytes_b64", with = "base64_bytes")]
    pub bytes: Vec<u8>,
    pub mime: String,
    pub prompt_used: String,
    pub content_hash: String,
}

impl MediaArtifact {
    pub fn new(
        media_kind: MediaKind,
        bytes: Vec<u8>,
        mime: impl Into<String>,
        prompt_used: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let mime = mime.into();
        if !mime.starts_with(media_kind.mime_prefix()) {
            return Err(BackendError::BadPayload(format!(
                "mime {mime:?} does not match {media_kind:?}"
            )));
        }
        let content_hash = sha256_hex(&bytes);
        Ok(Self {
            media_kind,
            bytes,
            mime,
            prompt_used: prompt_used.into(),
            content_hash,
        })
    }

    /// Decodes a base64 payload returned by a media server.
    pub fn from_b64(
        media_kind: MediaKind,
        payload: &str,
        mime: impl Into<String>,
        prompt_used: impl Into<String>,
    ) -> Result<Self, BackendError> {
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(payload.trim())
            .map_err(|e| BackendError::BadPayload(e.to_string()))?;
        Self::new(media_kind, bytes, mime, prompt_used)
    }

    pub fn to_b64(&self) -> String {
        use base64::Engine;
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }

    pub fn verify(&self) -> bool {
        sha256_hex(&self.bytes) == self.content_hash
    }
}

/// One attempted backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub backend: BackendKind,
    pub operation: String,
    pub attempt: u32,
    pub input: String,
    pub ok: bool,
}

/// Append-only, shareable log of backend calls.
#[derive(Debug, Default)]
pub struct CallLog {
    entries: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn append(&self, record: CallRecord) {
        self.entries.lock().expect("call log poisoned").push(record);
    }

    pub fn entries(&self) -> Vec<CallRecord> {
        self.entries.lock().expect("call log poisoned").clone()
    }

    pub fn count(&self, operation: &str) -> usize {
        self.entries
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|r| r.operation == operation)
            .count()
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn describe(&self) -> String;
    async fn complete_chat(&self, req: &ChatRequest) -> Result<ChatReply, BackendError>;
}

#[async_trait]
pub trait ImageBackend: Send + Sync {
    fn describe(&self) -> String;
    async fn generate_image(&self, prompt: &str, seed: Option<u64>) -> Result<MediaArtifact, BackendError>;
}

#[async_trait]
pub trait SpeechBackend: Send + Sync {
    fn describe(&self) -> String;
    async fn synthesize_speech(&self, text: &str) -> Result<MediaArtifact, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FidHandle {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FidStatus {
    Pending,
    Done { fid: f64 },
    Failed { message: String },
}

#[async_trait]
pub trait ScorerBackend: Send + Sync {
    fn describe(&self) -> String;
    async fn score_clip(&self, image: &MediaArtifact, text: &str) -> Result<f64, BackendError>;
    async fn submit_fid(&self, pairs: &[(MediaArtifact, String)]) -> Result<FidHandle, BackendError>;
    async fn poll_fid(&self, handle: &FidHandle) -> Result<FidStatus, BackendError>;
}

/// Which reference images exist for FID pairing.
pub trait ReferenceIndex: Send + Sync {
    fn contains(&self, image_id: &str) -> bool;
}

impl ReferenceIndex for HashSet<String> {
    fn contains(&self, image_id: &str) -> bool {
        HashSet::contains(self, image_id)
    }
}

/// Reference images stored as `{image_id}.{ext}` files in one directory.
#[derive(Debug, Clone)]
pub struct DirReferenceIndex {
    ids: HashSet<String>,
    pub root: PathBuf,
}

impl DirReferenceIndex {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        let mut ids = HashSet::new();
        for entry in std::fs::read_dir(&root)? {
            let path = entry?.path();
            if path.is_file() {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.insert(stem.to_string());
                }
            }
        }
        Ok(Self { ids, root })
    }
}

impl ReferenceIndex for DirReferenceIndex {
    fn contains(&self, image_id: &str) -> bool {
        self.ids.contains(image_id)
    }
}

/// Validates and submits a batch of (generated image, reference id) pairs.
pub async fn collect_fid_pair(
    scorer: &dyn ScorerBackend,
    references: &dyn ReferenceIndex,
    batch: &[(MediaArtifact, String)],
) -> Result<FidHandle, BackendError> {
    if batch.is_empty() {
        return Err(BackendError::Precondition("FID batch is empty".into()));
    }
    if let Some((a, _)) = batch.iter().find(|(a, _)| a.media_kind != MediaKind::Image) {
        return Err(BackendError::Precondition(format!(
            "FID pair carries {:?} artifact",
            a.media_kind
        )));
    }
    let mut missing: Vec<String> = batch
        .iter()
        .filter(|(_, id)| !references.contains(id))
        .map(|(_, id)| id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(BackendError::MissingReference(missing));
    }
    scorer.submit_fid(batch).await
}

/// Polls a FID job until it finishes or `max_polls` is reached.
pub async fn await_fid(
    scorer: &dyn ScorerBackend,
    handle: &FidHandle,
    poll_interval: Duration,
    max_polls: u32,
) -> Result<f64, BackendError> {
    for _ in 0..max_polls.max(1) {
        match scorer.poll_fid(handle).await? {
            FidStatus::Done { fid } => return Ok(fid),
            FidStatus::Failed { message } => return Err(BackendError::ScorerError(message)),
            FidStatus::Pending => tokio::time::sleep(poll_interval).await,
        }
    }
    Err(BackendError::Timeout)
}

pub(crate) fn require_non_empty(what: &str, value: &str) -> Result<(), BackendError> {
    if value.trim().is_empty() {
        return Err(BackendError::Precondition(format!("{what} is empty")));
    }
    Ok(())
}
