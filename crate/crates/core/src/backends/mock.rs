//! Deterministic in-process backends. Identical inputs give identical
//! artifacts on every platform: all generation is integer arithmetic over a
//! SHA-256 digest.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;

use super::{
    require_non_empty, BackendError, BackendKind, CallLog, CallRecord, ChatBackend, ChatReply, ChatRequest,
    FidHandle, FidStatus, FinishReason, ImageBackend, MediaArtifact, MediaKind, ScorerBackend, SpeechBackend,
};
use crate::digest::sha256_bytes;
use crate::metrics::tokenize;
use crate::model::{InstructionRecord, StructuredResponse, WireProfile};

pub const MOCK_IMAGE_SIZE: u32 = 64;
const SPEECH_SAMPLE_RATE: u32 = 16_000;
const SAMPLES_PER_CHAR: u32 = 320;

type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Scripted or rule-driven chat model.
pub struct MockChat {
    name: String,
    responder: Box<Responder>,
    log: Arc<CallLog>,
    delay: Option<Duration>,
}

impl std::fmt::Debug for MockChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockChat").field("name", &self.name).finish()
    }
}

impl MockChat {
    pub fn from_fn(
        name: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            responder: Box::new(f),
            log: CallLog::new(),
            delay: None,
        }
    }

    /// Replies from a queue, in order. Fails once the queue is empty.
    pub fn scripted(replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::scripted_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn scripted_results(replies: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        let queue: Mutex<VecDeque<_>> = Mutex::new(replies.into_iter().collect());
        Self::from_fn("mock:scripted", move |_| {
            queue
                .lock()
                .expect("script poisoned")
                .pop_front()
                .unwrap_or(Err(BackendError::ScriptExhausted))
        })
    }

    pub fn constant(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::from_fn("mock:constant", move |_| Ok(reply.clone()))
    }

    /// Always answers with a text-route structured response.
    pub fn always_text(response: &str) -> Self {
        let reply = StructuredResponse::text(response)
            .expect("non-empty mock response")
            .to_json(WireProfile::Speech);
        let mut m = Self::constant(reply);
        m.name = "mock:text".into();
        m
    }

    /// Emits each record's ground-truth output for the instruction found in
    /// the prompt. Unknown instructions are echoed back as text responses.
    pub fn oracle(records: &[InstructionRecord]) -> Self {
        let mut table: Vec<(String, String)> = Vec::with_capacity(records.len());
        let mut seen = HashSet::new();
        for r in records {
            if seen.insert(r.instruction.clone()) {
                table.push((r.instruction.clone(), r.output.to_json(WireProfile::Speech)));
            }
        }
        Self::from_fn("mock:oracle", move |req| Ok(oracle_reply(&table, &req.prompt)))
    }

    /// Teacher model: one instruction per bracketed caption after the
    /// caption header of a teacher prompt.
    pub fn teacher() -> Self {
        Self::from_fn("mock:teacher", |req| Ok(teacher_reply(&req.prompt)))
    }

    pub fn failing(error: BackendError) -> Self {
        Self::from_fn("mock:failing", move |_| Err(error.clone()))
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn with_log(mut self, log: Arc<CallLog>) -> Self {
        self.log = log;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }
}

fn last_instruction(prompt: &str) -> &str {
    let p = prompt.trim_end();
    if let Some(stripped) = p.strip_suffix("Response:") {
        if let Some(i) = stripped.rfind("Instruction: ") {
            return stripped[i + "Instruction: ".len()..].trim();
        }
    }
    match p.rfind("\n\n") {
        Some(i) => p[i + 2..].trim(),
        None => p.trim(),
    }
}

fn oracle_reply(table: &[(String, String)], prompt: &str) -> String {
    let mut best: Option<(usize, usize, &str)> = None;
    for (instruction, reply) in table {
        if let Some(idx) = prompt.rfind(instruction.as_str()) {
            let key = (idx + instruction.len(), instruction.len());
            if best.is_none_or(|(end, len, _)| key > (end, len)) {
                best = Some((key.0, key.1, reply));
            }
        }
    }
    match best {
        Some((_, _, reply)) => reply.to_string(),
        None => match StructuredResponse::text(last_instruction(prompt)) {
            Ok(s) => s.to_json(WireProfile::Speech),
            Err(_) => String::new(),
        },
    }
}

const TEACHER_VERBS: [&str; 4] = ["Create", "Design", "Produce", "Generate"];
const SPEECH_VERBS: [&str; 4] = ["Read aloud", "Recite", "Say", "Narrate"];

fn teacher_reply(prompt: &str) -> String {
    let speech = prompt.contains("speech contents");
    let Some(start) = prompt.find("for each of them:") else {
        return String::new();
    };
    let mut out = Vec::new();
    for (i, line) in prompt[start..]
        .lines()
        .map(str::trim)
        .filter(|l| l.starts_with('[') && l.ends_with(']'))
        .enumerate()
    {
        let caption = &line[1..line.len() - 1];
        let instruction = if speech {
            format!("{} the following passage: {caption}", SPEECH_VERBS[i % 4])
        } else {
            format!("{} a picture showing {caption}", TEACHER_VERBS[i % 4])
        };
        out.push(format!("{line}\nInstruction: {instruction}"));
    }
    out.join("\n\n")
}

#[async_trait]
impl ChatBackend for MockChat {
    fn describe(&self) -> String {
        self.name.clone()
    }

    async fn complete_chat(&self, req: &ChatRequest) -> Result<ChatReply, BackendError> {
        req.validate()?;
        if let Some(d) = self.delay {
            tokio::time::sleep(d).await;
        }
        let result = (self.responder)(req);
        self.log.append(CallRecord {
            backend: BackendKind::Llm,
            operation: "complete_chat".into(),
            attempt: 1,
            input: req.prompt.clone(),
            ok: result.is_ok(),
        });
        let text = result?;
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() > req.max_new_tokens as usize {
            return Ok(ChatReply {
                text: words[..req.max_new_tokens as usize].join(" "),
                finish_reason: FinishReason::Length,
            });
        }
        Ok(ChatReply {
            text,
            finish_reason: FinishReason::Stop,
        })
    }
}

fn image_key(prompt: &str, seed: Option<u64>) -> [u8; 32] {
    let mut buf = Vec::with_capacity(prompt.len() + 9);
    buf.extend_from_slice(prompt.as_bytes());
    buf.push(0);
    match seed {
        Some(s) => buf.extend_from_slice(&s.to_be_bytes()),
        None => buf.extend_from_slice(b"none"),
    }
    sha256_bytes(&buf)
}

/// 64×64 PNG whose pixels are a fixed function of `digest(prompt, seed)`.
pub fn render_hash_image(prompt: &str, seed: Option<u64>) -> Vec<u8> {
    use image::ImageEncoder;
    let d = image_key(prompt, seed);
    let n = MOCK_IMAGE_SIZE as usize;
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            pixels.push(d[(x * 7 + y * 3) % 32] ^ (x as u8).wrapping_mul(4));
            pixels.push(d[(x + y * 5) % 32] ^ (y as u8).wrapping_mul(4));
            pixels.push(d[(x * y + 11) % 32]);
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&pixels, MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE, image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

#[derive(Debug, Clone, Default)]
pub struct MockImage {
    log: Arc<CallLog>,
}

impl MockImage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_log(log: Arc<CallLog>) -> Self {
        Self { log }
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }
}

#[async_trait]
impl ImageBackend for MockImage {
    fn describe(&self) -> String {
        "mock:image".into()
    }

    async fn generate_image(&self, prompt: &str, seed: Option<u64>) -> Result<MediaArtifact, BackendError> {
        require_non_empty("image prompt", prompt)?;
        self.log.append(CallRecord {
            backend: BackendKind::Image,
            operation: "generate_image".into(),
            attempt: 1,
            input: prompt.to_string(),
            ok: true,
        });
        MediaArtifact::new(MediaKind::Image, render_hash_image(prompt, seed), "image/png", prompt)
    }
}

/// 16 kHz mono PCM WAV with one short square-wave tone per character.
pub fn render_echo_wav(text: &str) -> Vec<u8> {
    let mut samples: Vec<i16> = Vec::new();
    for c in text.chars().take(4096) {
        let freq = 200 + (c as u32 % 600);
        for i in 0..SAMPLES_PER_CHAR {
            let phase = (i * freq * 2 / SPEECH_SAMPLE_RATE) % 2;
            samples.push(if phase == 0 { 6000 } else { -6000 });
        }
    }
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SPEECH_SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SPEECH_SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct MockSpeech {
    log: Arc<CallLog>,
}

impl MockSpeech {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_log(log: Arc<CallLog>) -> Self {
        Self { log }
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }
}

#[async_trait]
impl SpeechBackend for MockSpeech {
    fn describe(&self) -> String {
        "mock:speech".into()
    }

    async fn synthesize_speech(&self, text: &str) -> Result<MediaArtifact, BackendError> {
        require_non_empty("speech text", text)?;
        self.log.append(CallRecord {
            backend: BackendKind::Speech,
            operation: "synthesize_speech".into(),
            attempt: 1,
            input: text.to_string(),
            ok: true,
        });
        MediaArtifact::new(MediaKind::Audio, render_echo_wav(text), "audio/wav", text)
    }
}

/// Token-set overlap scaled to [0, 100].
pub fn overlap_score(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = tokenize(a).into_iter().collect();
    let b: HashSet<String> = tokenize(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    100.0 * a.intersection(&b).count() as f64 / union as f64
}

/// Mean percentage of differing bytes between generated and reference images.
fn byte_distance(a: &[u8], b: &[u8]) -> f64 {
    let len = a.len().max(b.len());
    if len == 0 {
        return 0.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    100.0 * (len - same) as f64 / len as f64
}

/// CLIP stand-in: `100 × |tokens(prompt_used) ∩ tokens(text)| / |union|`.
/// FID stand-in: mean byte distance against stored reference images.
#[derive(Debug, Default)]
pub struct MockScorer {
    references: BTreeMap<String, Vec<u8>>,
    jobs: Mutex<HashMap<String, f64>>,
    next_job: AtomicU64,
    down: bool,
    log: Arc<CallLog>,
}

impl MockScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_references(mut self, refs: impl IntoIterator<Item = (String, Vec<u8>)>) -> Self {
        self.references.extend(refs);
        self
    }

    /// A scorer whose every call fails.
    pub fn unavailable() -> Self {
        Self {
            down: true,
            ..Self::default()
        }
    }

    pub fn reference_ids(&self) -> HashSet<String> {
        self.references.keys().cloned().collect()
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }

    fn record(&self, operation: &str, input: &str) -> Result<(), BackendError> {
        self.log.append(CallRecord {
            backend: BackendKind::Scorer,
            operation: operation.into(),
            attempt: 1,
            input: input.to_string(),
            ok: !self.down,
        });
        if self.down {
            return Err(BackendError::ScorerError("scorer unavailable".into()));
        }
        Ok(())
    }
}

#[async_trait]
impl ScorerBackend for MockScorer {
    fn describe(&self) -> String {
        "mock:scorer".into()
    }

    async fn score_clip(&self, image: &MediaArtifact, text: &str) -> Result<f64, BackendError> {
        self.record("score_clip", text)?;
        if image.media_kind != MediaKind::Image {
            return Err(BackendError::Precondition("CLIP scoring needs an image".into()));
        }
        Ok(overlap_score(&image.prompt_used, text))
    }

    async fn submit_fid(&self, pairs: &[(MediaArtifact, String)]) -> Result<FidHandle, BackendError> {
        self.record("submit_fid", &format!("{} pairs", pairs.len()))?;
        let mut missing: Vec<String> = pairs
            .iter()
            .filter(|(_, id)| !self.references.contains_key(id))
            .map(|(_, id)| id.clone())
            .collect();
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(BackendError::MissingReference(missing));
        }
        let total: f64 = pairs
            .iter()
            .map(|(a, id)| byte_distance(&a.bytes, &self.references[id]))
            .sum();
        let fid = total / pairs.len().max(1) as f64;
        let job_id = format!("fid-{}", self.next_job.fetch_add(1, Ordering::SeqCst));
        self.jobs.lock().expect("jobs poisoned").insert(job_id.clone(), fid);
        Ok(FidHandle { job_id })
    }

    async fn poll_fid(&self, handle: &FidHandle) -> Result<FidStatus, BackendError> {
        self.record("poll_fid", &handle.job_id)?;
        match self.jobs.lock().expect("jobs poisoned").get(&handle.job_id) {
            Some(fid) => Ok(FidStatus::Done { fid: *fid }),
            None => Err(BackendError::ScorerError(format!("unknown job {}", handle.job_id))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockKind {
    Llm,
    Image,
    Speech,
    Scorer,
}

pub enum MockBackend {
    Chat(MockChat),
    Image(MockImage),
    Speech(MockSpeech),
    Scorer(MockScorer),
}

/// Builds a mock of `kind`. `script` only applies to the chat mock.
pub fn make_mock(kind: MockKind, script: Vec<String>) -> MockBackend {
    match kind {
        MockKind::Llm => MockBackend::Chat(MockChat::scripted(script)),
        MockKind::Image => MockBackend::Image(MockImage::new()),
        MockKind::Speech => MockBackend::Speech(MockSpeech::new()),
        MockKind::Scorer => MockBackend::Scorer(MockScorer::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Modality, RecordSource};

    #[tokio::test]
    async fn scripted_chat_returns_exact_text() {
        let m = MockChat::scripted(["{\"type\":\"text\",\"response\":\"2\"}"]);
        let r = m.complete_chat(&ChatRequest::new("1+1")).await.unwrap();
        assert_eq!(r.text, "{\"type\":\"text\",\"response\":\"2\"}");
        assert_eq!(r.finish_reason, FinishReason::Stop);
        assert_eq!(
            m.complete_chat(&ChatRequest::new("again")).await,
            Err(BackendError::ScriptExhausted)
        );
        assert_eq!(m.log().count("complete_chat"), 2);
    }

    #[tokio::test]
    async fn truncation_reports_length() {
        let m = MockChat::constant("one two three four");
        let mut req = ChatRequest::new("x");
        req.max_new_tokens = 2;
        let r = m.complete_chat(&req).await.unwrap();
        assert_eq!(r.finish_reason, FinishReason::Length);
        assert_eq!(r.text, "one two");
    }

    #[tokio::test]
    async fn oracle_matches_latest_instruction() {
        let rec = |i: &str, m: Modality, r: &str| {
            InstructionRecord::new(i, StructuredResponse::new(m, r).unwrap(), RecordSource::Human).unwrap()
        };
        let m = MockChat::oracle(&[
            rec("draw a cat", Modality::Image, "a cat"),
            rec("say hello", Modality::Speech, "hello"),
        ]);
        let prompt = crate::prompting::render_fewshot_prompt("say hello").unwrap();
        let r = m.complete_chat(&ChatRequest::new(prompt)).await.unwrap();
        assert_eq!(r.text, r#"{"type":"speech","response":"hello"}"#);
        let r = m
            .complete_chat(&ChatRequest::new("User: say hello\n\ndraw a cat"))
            .await
            .unwrap();
        assert_eq!(r.text, r#"{"type":"image","response":"a cat"}"#);
        let r = m.complete_chat(&ChatRequest::new("1+1=?")).await.unwrap();
        assert_eq!(r.text, r#"{"type":"text","response":"1+1=?"}"#);
    }

    #[tokio::test]
    async fn image_mock_is_deterministic() {
        let m = MockImage::new();
        let a = m.generate_image("a red fox", Some(7)).await.unwrap();
        let b = m.generate_image("a red fox", Some(7)).await.unwrap();
        let c = m.generate_image("a red fox", Some(8)).await.unwrap();
        assert_eq!(a.content_hash, b.content_hash);
        assert_ne!(a.content_hash, c.content_hash);
        assert_eq!(a.mime, "image/png");
        let img = image::load_from_memory(&a.bytes).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        assert!(matches!(
            m.generate_image(" ", None).await,
            Err(BackendError::Precondition(_))
        ));
        assert_eq!(m.log().count("generate_image"), 3);
    }

    #[tokio::test]
    async fn speech_mock_echoes() {
        let m = MockSpeech::new();
        let a = m.synthesize_speech("McDonald's").await.unwrap();
        assert_eq!(a.prompt_used, "McDonald's");
        assert_eq!(a.mime, "audio/wav");
        assert_eq!(&a.bytes[..4], b"RIFF");
        assert_eq!(a.bytes.len(), 44 + 10 * SAMPLES_PER_CHAR as usize * 2);
        let t = "She sells sea shells by the seashore. The shells she sells are surely seashells. So if she sells shells on the seashore, I'm sure she sells seashore shells.";
        assert_eq!(m.synthesize_speech(t).await.unwrap().prompt_used, t);
        assert!(m.synthesize_speech("").await.is_err());
    }

    #[tokio::test]
    async fn scorer_overlap_formula() {
        let s = MockScorer::new();
        let img = MockImage::new().generate_image("a red fox in snow", None).await.unwrap();
        // {a, red, fox, in, snow} vs {a, fox, on, grass}: 2 shared of 7
        let score = s.score_clip(&img, "A fox on grass").await.unwrap();
        assert!((score - 100.0 * 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(s.score_clip(&img, "a red fox in snow").await.unwrap(), 100.0);
        let down = MockScorer::unavailable();
        assert!(matches!(
            down.score_clip(&img, "x").await,
            Err(BackendError::ScorerError(_))
        ));
    }

    #[tokio::test]
    async fn teacher_mock_answers_each_caption() {
        let prompt = "Please generate an appropriate instruction for each of them:\n\n[A dog]\n\n[A cat]";
        let reply = MockChat::teacher().complete_chat(&ChatRequest::new(prompt)).await.unwrap();
        assert_eq!(
            reply.text,
            "[A dog]\nInstruction: Create a picture showing A dog\n\n[A cat]\nInstruction: Design a picture showing A cat"
        );
    }

    #[test]
    fn make_mock_kinds() {
        assert!(matches!(make_mock(MockKind::Llm, vec![]), MockBackend::Chat(_)));
        assert!(matches!(make_mock(MockKind::Image, vec![]), MockBackend::Image(_)));
        assert!(matches!(make_mock(MockKind::Speech, vec![]), MockBackend::Speech(_)));
        assert!(matches!(make_mock(MockKind::Scorer, vec![]), MockBackend::Scorer(_)));
    }
}
