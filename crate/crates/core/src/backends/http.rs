use std::sync::Arc;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{
    require_non_empty, BackendConfig, BackendError, BackendKind, CallLog, CallRecord, ChatBackend, ChatReply,
    ChatRequest, FidHandle, FidStatus, FinishReason, ImageBackend, MediaArtifact, MediaKind, ScorerBackend,
    SpeechBackend, DEFAULT_IMAGE_SIZE,
};

/// Shared HTTP plumbing: auth header, timeout and bounded retries.
#[derive(Debug, Clone)]
struct Transport {
    cfg: BackendConfig,
    client: reqwest::Client,
    log: Arc<CallLog>,
}

impl Transport {
    fn new(cfg: BackendConfig, expected: BackendKind, log: Arc<CallLog>) -> Result<Self, BackendError> {
        cfg.validate(expected)?;
        let client = reqwest::Client::builder()
            .timeout(cfg.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { cfg, client, log })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.base_url(), path)
    }

    async fn send(
        &self,
        operation: &str,
        input: &str,
        build: impl Fn() -> reqwest::RequestBuilder,
    ) -> Result<serde_json::Value, BackendError> {
        let mut last = BackendError::Transport("no attempt made".into());
        for attempt in 0..=self.cfg.max_retries() {
            if attempt > 0 {
                tokio::time::sleep(self.cfg.retry_backoff() * attempt).await;
            }
            let mut req = build();
            if let Some(token) = self.cfg.auth_token() {
                req = req.bearer_auth(token.expose());
            }
            let result = self.attempt(req).await;
            self.log.append(CallRecord {
                backend: self.cfg.kind(),
                operation: operation.to_string(),
                attempt: attempt + 1,
                input: input.to_string(),
                ok: result.is_ok(),
            });
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() => {
                    tracing::debug!(operation, attempt, error = %e, "retrying backend call");
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }

    async fn attempt(&self, req: reqwest::RequestBuilder) -> Result<serde_json::Value, BackendError> {
        let resp = req.send().await.map_err(map_reqwest)?;
        let status = resp.status();
        let body = resp.text().await.map_err(map_reqwest)?;
        if status.is_client_error() {
            return Err(BackendError::RemoteRefusal {
                status: status.as_u16(),
                body,
            });
        }
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {}: {body}", status.as_u16())));
        }
        serde_json::from_str(&body).map_err(|e| BackendError::BadPayload(e.to_string()))
    }
}

fn map_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn decode<T: for<'de> Deserialize<'de>>(value: serde_json::Value) -> Result<T, BackendError> {
    serde_json::from_value(value).map_err(|e| BackendError::BadPayload(e.to_string()))
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpChat {
    transport: Transport,
}

impl HttpChat {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Self::with_log(cfg, CallLog::new())
    }

    pub fn with_log(cfg: BackendConfig, log: Arc<CallLog>) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(cfg, BackendKind::Llm, log)?,
        })
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.transport.log
    }
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[async_trait]
impl ChatBackend for HttpChat {
    fn describe(&self) -> String {
        self.transport.cfg.base_url().to_string()
    }

    async fn complete_chat(&self, req: &ChatRequest) -> Result<ChatReply, BackendError> {
        req.validate()?;
        let t = &self.transport;
        let body = json!({
            "model": t.cfg.model().unwrap_or("default"),
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        });
        let url = t.url("/v1/chat/completions");
        let value = t
            .send("complete_chat", &req.prompt, || t.client.post(&url).json(&body))
            .await?;
        let resp: CompletionResponse = decode(value)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::BadPayload("no choices in completion".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let text = choice
            .message
            .content
            .ok_or_else(|| BackendError::BadPayload("completion has no message content".into()))?;
        Ok(ChatReply { text, finish_reason })
    }
}

/// Client for `POST {base}/generate`.
#[derive(Debug, Clone)]
pub struct HttpImage {
    transport: Transport,
    pub width: u32,
    pub height: u32,
}

impl HttpImage {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Self::with_log(cfg, CallLog::new())
    }

    pub fn with_log(cfg: BackendConfig, log: Arc<CallLog>) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(cfg, BackendKind::Image, log)?,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
        })
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.transport.log
    }
}

#[derive(Deserialize)]
struct ImageReply {
    image_b64: String,
    mime: String,
}

#[async_trait]
impl ImageBackend for HttpImage {
    fn describe(&self) -> String {
        self.transport.cfg.base_url().to_string()
    }

    async fn generate_image(&self, prompt: &str, seed: Option<u64>) -> Result<MediaArtifact, BackendError> {
        require_non_empty("image prompt", prompt)?;
        let t = &self.transport;
        let body = json!({"prompt": prompt, "seed": seed, "width": self.width, "height": self.height});
        let url = t.url("/generate");
        let value = t.send("generate_image", prompt, || t.client.post(&url).json(&body)).await?;
        let reply: ImageReply = decode(value)?;
        MediaArtifact::from_b64(MediaKind::Image, &reply.image_b64, reply.mime, prompt)
    }
}

/// Client for `POST {base}/synthesize`.
#[derive(Debug, Clone)]
pub struct HttpSpeech {
    transport: Transport,
}

impl HttpSpeech {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Self::with_log(cfg, CallLog::new())
    }

    pub fn with_log(cfg: BackendConfig, log: Arc<CallLog>) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(cfg, BackendKind::Speech, log)?,
        })
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.transport.log
    }
}

#[derive(Deserialize)]
struct SpeechReply {
    audio_b64: String,
    mime: String,
}

#[async_trait]
impl SpeechBackend for HttpSpeech {
    fn describe(&self) -> String {
        self.transport.cfg.base_url().to_string()
    }

    async fn synthesize_speech(&self, text: &str) -> Result<MediaArtifact, BackendError> {
        require_non_empty("speech text", text)?;
        let t = &self.transport;
        let body = json!({"text": text});
        let url = t.url("/synthesize");
        let value = t.send("synthesize_speech", text, || t.client.post(&url).json(&body)).await?;
        let reply: SpeechReply = decode(value)?;
        MediaArtifact::from_b64(MediaKind::Audio, &reply.audio_b64, reply.mime, text)
    }
}

/// Client for the CLIP and FID scoring endpoints.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    transport: Transport,
}

impl HttpScorer {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Self::with_log(cfg, CallLog::new())
    }

    pub fn with_log(cfg: BackendConfig, log: Arc<CallLog>) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(cfg, BackendKind::Scorer, log)?,
        })
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.transport.log
    }
}

fn scorer_error(e: BackendError) -> BackendError {
    match e {
        BackendError::RemoteRefusal { status, body } => {
            BackendError::ScorerError(format!("HTTP {status}: {body}"))
        }
        other => other,
    }
}

#[derive(Deserialize)]
struct ClipReply {
    score: f64,
}

#[derive(Deserialize)]
struct FidSubmitReply {
    job_id: String,
}

#[derive(Deserialize)]
struct FidPollReply {
    status: String,
    #[serde(default)]
    fid: Option<f64>,
    #[serde(default)]
    message: Option<String>,
}

#[async_trait]
impl ScorerBackend for HttpScorer {
    fn describe(&self) -> String {
        self.transport.cfg.base_url().to_string()
    }

    async fn score_clip(&self, image: &MediaArtifact, text: &str) -> Result<f64, BackendError> {
        if image.media_kind != MediaKind::Image {
            return Err(BackendError::Precondition("CLIP scoring needs an image".into()));
        }
        let t = &self.transport;
        let body = json!({"image_b64": image.to_b64(), "text": text});
        let url = t.url("/clip");
        let value = t
            .send("score_clip", text, || t.client.post(&url).json(&body))
            .await
            .map_err(scorer_error)?;
        Ok(decode::<ClipReply>(value)?.score)
    }

    async fn submit_fid(&self, pairs: &[(MediaArtifact, String)]) -> Result<FidHandle, BackendError> {
        let t = &self.transport;
        let pairs_json: Vec<_> = pairs
            .iter()
            .map(|(a, id)| json!({"gen_b64": a.to_b64(), "ref_id": id}))
            .collect();
        let body = json!({"pairs": pairs_json});
        let url = t.url("/fid");
        let input = format!("{} pairs", pairs.len());
        let value = t
            .send("submit_fid", &input, || t.client.post(&url).json(&body))
            .await
            .map_err(scorer_error)?;
        Ok(FidHandle {
            job_id: decode::<FidSubmitReply>(value)?.job_id,
        })
    }

    async fn poll_fid(&self, handle: &FidHandle) -> Result<FidStatus, BackendError> {
        let t = &self.transport;
        let url = t.url(&format!("/fid/{}", handle.job_id));
        let value = t
            .send("poll_fid", &handle.job_id, || t.client.get(&url))
            .await
            .map_err(scorer_error)?;
        let reply: FidPollReply = decode(value)?;
        match reply.status.as_str() {
            "done" => reply
                .fid
                .map(|fid| FidStatus::Done { fid })
                .ok_or_else(|| BackendError::BadPayload("done FID job without value".into())),
            "failed" | "error" => Ok(FidStatus::Failed {
                message: reply.message.unwrap_or_default(),
            }),
            _ => Ok(FidStatus::Pending),
        }
    }
}
