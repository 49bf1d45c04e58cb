//! Instruction → LLM → structured response → one conversion backend.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendError, BackendSet, ChatBackend, ChatRequest, ImageBackend, MediaArtifact, SpeechBackend,
    DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::clock::{Clock, SystemClock};
use crate::digest::digest_u64;
use crate::model::Modality;
use crate::parse::{parse_structured_response, ParseOutcome};
use crate::prompting::{render_fewshot_prompt, render_tuned_prompt, ConversationHistory};

/// Appended to the prompt when the previous reply could not be parsed.
pub const REASK_LINE: &str = "Reply with exactly one JSON object of the form {\"type\": \"text\" | \"image\" | \"speech\", \"response\": \"...\"} and nothing else.";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// The model was tuned to emit structured responses; the instruction is
    /// sent as-is after any history.
    #[default]
    Tuned,
    /// An untuned model primed with the in-context template.
    Fewshot,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Tuned => "tuned",
            Policy::Fewshot => "fewshot",
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tuned" => Ok(Policy::Tuned),
            "fewshot" | "few-shot" => Ok(Policy::Fewshot),
            other => Err(format!("unknown policy {other:?} (expected tuned or fewshot)")),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub policy: Policy,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub fallback_to_text: bool,
    pub max_reasks: u32,
    /// Mixed into the digest-derived image seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_salt: Option<u64>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Tuned,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            fallback_to_text: true,
            max_reasks: 0,
            seed_salt: None,
        }
    }
}

/// Everything that happened while routing one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTrace {
    pub instruction: String,
    pub policy: Policy,
    pub llm_prompt: String,
    pub llm_calls: u32,
    pub raw_llm_text: String,
    pub parse_outcome: Option<ParseOutcome>,
    pub conversion_prompt: Option<String>,
    pub image_seed: Option<u64>,
    /// Milliseconds per backend call, keyed `llm#1`, `llm#2`, ..., `image`, `speech`.
    pub backend_latencies: BTreeMap<String, u64>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

impl RouteTrace {
    pub fn fell_back_to_text(&self) -> bool {
        self.parse_outcome.as_ref().is_some_and(|p| p.fell_back_to_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedResult {
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<MediaArtifact>,
    pub trace: RouteTrace,
}

impl RoutedResult {
    /// The parsed response field: the answer for text, the conversion prompt
    /// otherwise. This is what goes back into conversation history.
    pub fn response(&self) -> &str {
        self.text
            .as_deref()
            .or(self.trace.conversion_prompt.as_deref())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum RouteErrorKind {
    EmptyInstruction,
    Prompt(String),
    BackendUnavailable(Modality),
    Backend { stage: String, error: BackendError },
    Unparseable,
}

impl fmt::Display for RouteErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteErrorKind::EmptyInstruction => f.write_str("instruction is empty"),
            RouteErrorKind::Prompt(msg) => write!(f, "prompt rendering failed: {msg}"),
            RouteErrorKind::BackendUnavailable(m) => write!(f, "no {m} backend configured"),
            RouteErrorKind::Backend { stage, error } => write!(f, "{stage} backend failed: {error}"),
            RouteErrorKind::Unparseable => f.write_str("LLM reply has no structured response"),
        }
    }
}

/// A routing failure with whatever trace was gathered before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteError {
    pub kind: RouteErrorKind,
    pub trace: Box<RouteTrace>,
}

impl fmt::Display for RouteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

impl std::error::Error for RouteError {}

#[derive(Clone)]
pub struct Router {
    llm: Arc<dyn ChatBackend>,
    image: Option<Arc<dyn ImageBackend>>,
    speech: Option<Arc<dyn SpeechBackend>>,
    config: RouterConfig,
    clock: Arc<dyn Clock>,
}

impl Router {
    pub fn new(llm: Arc<dyn ChatBackend>) -> Self {
        Self {
            llm,
            image: None,
            speech: None,
            config: RouterConfig::default(),
            clock: Arc::new(SystemClock::default()),
        }
    }

    pub fn from_backends(set: &BackendSet) -> Self {
        Self {
            image: set.image.clone(),
            speech: set.speech.clone(),
            ..Self::new(set.llm.clone())
        }
    }

    pub fn with_image(mut self, image: Arc<dyn ImageBackend>) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_speech(mut self, speech: Arc<dyn SpeechBackend>) -> Self {
        self.speech = Some(speech);
        self
    }

    pub fn with_config(mut self, config: RouterConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    /// Routes with the configured number of re-asks (zero by default).
    pub async fn route(&self, instruction: &str, history: &ConversationHistory) -> Result<RoutedResult, RouteError> {
        self.route_with(instruction, history, self.config.max_reasks, None).await
    }

    pub async fn route_with_retry(
        &self,
        instruction: &str,
        history: &ConversationHistory,
        max_reasks: u32,
    ) -> Result<RoutedResult, RouteError> {
        self.route_with(instruction, history, max_reasks, None).await
    }

    /// Full form: `image_seed` overrides the digest-derived default.
    pub async fn route_with(
        &self,
        instruction: &str,
        history: &ConversationHistory,
        max_reasks: u32,
        image_seed: Option<u64>,
    ) -> Result<RoutedResult, RouteError> {
        let mut trace = RouteTrace {
            instruction: instruction.to_string(),
            policy: self.config.policy,
            llm_prompt: String::new(),
            llm_calls: 0,
            raw_llm_text: String::new(),
            parse_outcome: None,
            conversion_prompt: None,
            image_seed: None,
            backend_latencies: BTreeMap::new(),
            started_unix_ms: self.clock.unix_millis(),
            finished_unix_ms: 0,
        };
        let fail = |kind: RouteErrorKind, mut trace: RouteTrace, clock: &dyn Clock| {
            trace.finished_unix_ms = clock.unix_millis();
            Err(RouteError {
                kind,
                trace: Box::new(trace),
            })
        };

        if instruction.trim().is_empty() {
            return fail(RouteErrorKind::EmptyInstruction, trace, &*self.clock);
        }
        let prompt = match self.config.policy {
            Policy::Tuned => render_tuned_prompt(history, instruction),
            Policy::Fewshot => render_fewshot_prompt(instruction),
        };
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => return fail(RouteErrorKind::Prompt(e.to_string()), trace, &*self.clock),
        };
        trace.llm_prompt = prompt.clone();

        let mut outcome;
        let mut attempt_prompt = prompt.clone();
        loop {
            trace.llm_calls += 1;
            let req = ChatRequest {
                prompt: attempt_prompt.clone(),
                temperature: self.config.temperature,
                max_new_tokens: self.config.max_new_tokens,
            };
            let t0 = self.clock.monotonic();
            let reply = self.llm.complete_chat(&req).await;
            trace
                .backend_latencies
                .insert(format!("llm#{}", trace.llm_calls), millis(self.clock.monotonic() - t0));
            let reply = match reply {
                Ok(r) => r,
                Err(error) => {
                    let kind = RouteErrorKind::Backend {
                        stage: "llm".into(),
                        error,
                    };
                    return fail(kind, trace, &*self.clock);
                }
            };
            trace.raw_llm_text = reply.text.clone();
            let last = trace.llm_calls > max_reasks;
            outcome = parse_structured_response(&reply.text, last && self.config.fallback_to_text);
            if outcome.is_success() || last {
                break;
            }
            tracing::debug!(attempt = trace.llm_calls, "unparseable LLM reply, re-asking");
            attempt_prompt = format!("{prompt}\n{REASK_LINE}");
        }

        let parsed = outcome.result.clone();
        trace.parse_outcome = Some(outcome);
        let Some(parsed) = parsed else {
            return fail(RouteErrorKind::Unparseable, trace, &*self.clock);
        };

        let modality = parsed.modality();
        let response = parsed.response().to_string();
        let artifact = match modality {
            Modality::Text => None,
            Modality::Image => {
                let Some(backend) = &self.image else {
                    return fail(RouteErrorKind::BackendUnavailable(modality), trace, &*self.clock);
                };
                let seed = image_seed.unwrap_or_else(|| match self.config.seed_salt {
                    None => digest_u64(response.as_bytes()),
                    Some(salt) => digest_u64(format!("{salt}:{response}").as_bytes()),
                });
                trace.image_seed = Some(seed);
                trace.conversion_prompt = Some(response.clone());
                let t0 = self.clock.monotonic();
                let result = backend.generate_image(&response, Some(seed)).await;
                trace
                    .backend_latencies
                    .insert("image".into(), millis(self.clock.monotonic() - t0));
                Some(result)
            }
            Modality::Speech => {
                let Some(backend) = &self.speech else {
                    return fail(RouteErrorKind::BackendUnavailable(modality), trace, &*self.clock);
                };
                trace.conversion_prompt = Some(response.clone());
                let t0 = self.clock.monotonic();
                let result = backend.synthesize_speech(&response).await;
                trace
                    .backend_latencies
                    .insert("speech".into(), millis(self.clock.monotonic() - t0));
                Some(result)
            }
        };
        let artifact = match artifact.transpose() {
            Ok(a) => a,
            Err(error) => {
                let kind = RouteErrorKind::Backend {
                    stage: modality.as_str().into(),
                    error,
                };
                return fail(kind, trace, &*self.clock);
            }
        };
        trace.finished_unix_ms = self.clock.unix_millis();
        Ok(RoutedResult {
            modality,
            text: (modality == Modality::Text).then_some(response),
            artifact,
            trace,
        })
    }
}

fn millis(d: std::time::Duration) -> u64 {
    d.as_millis() as u64
}
