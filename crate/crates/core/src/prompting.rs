//! Prompt templates: the few-shot baseline prompt, the teacher generation
//! prompt, and the conversational framing used with tuned models.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstructionRecord, Modality};

pub const FEWSHOT_TEMPLATE: &str = include_str!("../assets/templates/fewshot.txt");
pub const TEACHER_IMAGE_TEMPLATE: &str = include_str!("../assets/templates/teacher_image.txt");

/// Keyword swaps turning the image teacher prompt into the speech variant.
pub const SPEECH_KEYWORD_SWAPS: [(&str, &str); 2] = [("image", "speech"), ("descriptions", "contents")];

pub const MAX_TEACHER_CAPTIONS: usize = 60;
pub const TEACHER_SEEDS: usize = 3;
pub const DEFAULT_MAX_TURNS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("bad arity: {0}")]
    BadArity(String),
    #[error("teacher prompts target image or speech, not {0}")]
    UnsupportedModality(Modality),
    #[error("placeholder {{{0}}} is unbound")]
    Unbound(String),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits a body into literal text and `{name}` placeholders. Braces that do
/// not enclose an identifier (such as JSON examples) are literal.
fn segments(body: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                if open > 0 {
                    out.push(Segment::Literal(&rest[..open]));
                }
                out.push(Segment::Placeholder(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Segment::Literal(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Segment::Literal(rest));
    }
    out
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_placeholders = segments(&body)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Placeholder(name) => Some(name.to_string()),
                Segment::Literal(_) => None,
            })
            .collect();
        Self {
            id: id.into(),
            body,
            required_placeholders,
        }
    }

    pub fn from_file(id: impl Into<String>, path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::new(id, body))
    }

    pub fn fewshot() -> Self {
        Self::new("fewshot", FEWSHOT_TEMPLATE)
    }

    pub fn teacher(target: Modality) -> Result<Self, PromptError> {
        match target {
            Modality::Image => Ok(Self::new("teacher-image", TEACHER_IMAGE_TEMPLATE)),
            Modality::Speech => Ok(Self::new("teacher-speech", swap_keywords(TEACHER_IMAGE_TEMPLATE))),
            Modality::Text => Err(PromptError::UnsupportedModality(target)),
        }
    }

    /// Single-pass substitution; bound values are never re-expanded.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for segment in segments(&self.body) {
            match segment {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) => {
                    let value = bindings
                        .get(name)
                        .ok_or_else(|| PromptError::Unbound(name.to_string()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// Applies [`SPEECH_KEYWORD_SWAPS`] (outside placeholders).
pub fn swap_keywords(body: &str) -> String {
    let mut out = String::with_capacity(body.len());
    for segment in segments(body) {
        match segment {
            Segment::Literal(s) => {
                let mut s = s.to_string();
                for (from, to) in SPEECH_KEYWORD_SWAPS {
                    s = s.replace(from, to);
                }
                out.push_str(&s);
            }
            Segment::Placeholder(name) => {
                out.push('{');
                out.push_str(name);
                out.push('}');
            }
        }
    }
    out
}

/// Collapses internal whitespace so a caption fits on one bracketed line.
pub fn caption_line(caption: &str) -> String {
    caption.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_fewshot_prompt(instruction: &str) -> Result<String, PromptError> {
    if instruction.trim().is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    PromptTemplate::fewshot().render(&BTreeMap::from([("instruction", instruction)]))
}

pub fn render_teacher_prompt(
    seeds: &[InstructionRecord],
    captions: &[String],
    target_modality: Modality,
) -> Result<String, PromptError> {
    if seeds.len() != TEACHER_SEEDS {
        return Err(PromptError::BadArity(format!(
            "expected {TEACHER_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    if captions.is_empty() || captions.len() > MAX_TEACHER_CAPTIONS {
        return Err(PromptError::BadArity(format!(
            "expected 1..={MAX_TEACHER_CAPTIONS} captions, got {}",
            captions.len()
        )));
    }
    let template = PromptTemplate::teacher(target_modality)?;
    let examples = seeds
        .iter()
        .map(|s| {
            format!(
                "[{}]\nInstruction: {}",
                caption_line(s.output.response()),
                caption_line(&s.instruction)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let captions = captions
        .iter()
        .map(|c| format!("[{}]", caption_line(c)))
        .collect::<Vec<_>>()
        .join("\n\n");
    template.render(&BTreeMap::from([
        ("examples", examples.as_str()),
        ("captions", captions.as_str()),
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::User => "User",
            Role::Assistant => "Assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Bounded conversation history; the oldest turns drop first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationHistory {
    turns: VecDeque<Turn>,
    max_turns: usize,
}

impl Default for ConversationHistory {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_TURNS)
    }
}

impl ConversationHistory {
    pub fn new(max_turns: usize) -> Self {
        Self {
            turns: VecDeque::new(),
            max_turns: max_turns.max(1),
        }
    }

    pub fn from_turns(turns: impl IntoIterator<Item = Turn>, max_turns: usize) -> Self {
        let mut h = Self::new(max_turns);
        for t in turns {
            h.push(t.role, t.text);
        }
        h
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>) {
        self.turns.push_back(Turn {
            role,
            text: text.into(),
        });
        while self.turns.len() > self.max_turns {
            self.turns.pop_front();
        }
    }

    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }
}

/// Prior turns as `User:`/`Assistant:` lines, then the bare instruction.
pub fn render_tuned_prompt(history: &ConversationHistory, instruction: &str) -> Result<String, PromptError> {
    if instruction.trim().is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    if history.is_empty() {
        return Ok(instruction.to_string());
    }
    let mut out = String::new();
    for turn in history.turns() {
        out.push_str(turn.role.label());
        out.push_str(": ");
        out.push_str(&turn.text);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(instruction);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RecordSource, StructuredResponse};

    fn seed(instruction: &str, modality: Modality, response: &str) -> InstructionRecord {
        InstructionRecord::new(
            instruction,
            StructuredResponse::new(modality, response).unwrap(),
            RecordSource::Seed,
        )
        .unwrap()
    }

    fn image_seeds() -> Vec<InstructionRecord> {
        vec![
            seed(
                "Turn this sentence into an image: a photo of an astronaut riding a horse on Mars.",
                Modality::Image,
                "A photo of an astronaut riding a horse on Mars",
            ),
            seed(
                "Showcasing the city a hundred years from now.",
                Modality::Image,
                "A futuristic cityscape with towering skyscrapers and flying vehicles.",
            ),
            seed(
                "Show me a good design for web UI.",
                Modality::Image,
                "A master web UI design concept sketch featuring clean layout, intuitive navigation bar, and coherent color scheme.",
            ),
        ]
    }

    #[test]
    fn fewshot_ends_with_instruction() {
        let p = render_fewshot_prompt("What are the three primary colors?").unwrap();
        assert!(p.ends_with("Instruction: What are the three primary colors?\nResponse:"));
        assert!(p.contains("The three primary colors are red, blue, and yellow."));
        assert!(p.starts_with("You are a helpful assistant."));
    }

    #[test]
    fn fewshot_rejects_empty() {
        assert_eq!(render_fewshot_prompt("  "), Err(PromptError::EmptyInstruction));
    }

    #[test]
    fn fewshot_preamble_length() {
        let p = render_fewshot_prompt("x").unwrap();
        let preamble = &p[..p.rfind("Instruction: x").unwrap()];
        assert_eq!(preamble.split_whitespace().count(), 248);
        // word and punctuation pre-tokens, a lower bound on subword tokens
        let mut pre_tokens = 0;
        let mut in_word = false;
        for c in preamble.chars() {
            if c.is_alphanumeric() || c == '_' {
                if !in_word {
                    pre_tokens += 1;
                }
                in_word = true;
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    pre_tokens += 1;
                }
            }
        }
        assert!(pre_tokens > 400, "{pre_tokens}");
    }

    #[test]
    fn fewshot_template_has_single_placeholder() {
        let t = PromptTemplate::fewshot();
        assert_eq!(
            t.required_placeholders,
            BTreeSet::from(["instruction".to_string()])
        );
    }

    #[test]
    fn render_reports_unbound() {
        let t = PromptTemplate::new("t", "a {x} b {y}");
        assert_eq!(
            t.render(&BTreeMap::from([("x", "1")])),
            Err(PromptError::Unbound("y".into()))
        );
        assert_eq!(
            t.render(&BTreeMap::from([("x", "{y}"), ("y", "2")])).unwrap(),
            "a {y} b 2"
        );
    }

    #[test]
    fn teacher_prompt_contains_caption() {
        let caps = vec!["A large passenger airplane flying over some palm trees".to_string()];
        let p = render_teacher_prompt(&image_seeds(), &caps, Modality::Image).unwrap();
        assert!(p.contains("\n[A large passenger airplane flying over some palm trees]"));
        assert!(p.contains("[A photo of an astronaut riding a horse on Mars]\nInstruction: Turn this sentence"));
        assert!(p.starts_with("You are asked to generate instructions based on given image descriptions."));
    }

    #[test]
    fn teacher_prompt_arity() {
        let caps: Vec<String> = (0..61).map(|i| format!("caption {i}")).collect();
        assert!(matches!(
            render_teacher_prompt(&image_seeds(), &caps, Modality::Image),
            Err(PromptError::BadArity(_))
        ));
        assert!(matches!(
            render_teacher_prompt(&image_seeds(), &[], Modality::Image),
            Err(PromptError::BadArity(_))
        ));
        assert!(matches!(
            render_teacher_prompt(&image_seeds()[..2], &caps[..1], Modality::Image),
            Err(PromptError::BadArity(_))
        ));
        assert!(matches!(
            render_teacher_prompt(&image_seeds(), &caps[..1], Modality::Text),
            Err(PromptError::UnsupportedModality(Modality::Text))
        ));
    }

    #[test]
    fn teacher_prompt_each_caption_and_seed_once() {
        let caps: Vec<String> = (0..60).map(|i| format!("caption number {i:02} here")).collect();
        let seeds = image_seeds();
        let p = render_teacher_prompt(&seeds, &caps, Modality::Image).unwrap();
        for c in &caps {
            assert_eq!(p.matches(&format!("[{c}]")).count(), 1);
        }
        for s in &seeds {
            assert_eq!(p.matches(&format!("Instruction: {}", s.instruction)).count(), 1);
        }
    }

    #[test]
    fn speech_variant_swaps_keywords() {
        let t = PromptTemplate::teacher(Modality::Speech).unwrap();
        assert!(t.body.starts_with("You are asked to generate instructions based on given speech contents."));
        assert!(!t.body.contains("image"));
        assert_eq!(t.required_placeholders.len(), 2);
    }

    #[test]
    fn tuned_prompt_empty_history_is_bare() {
        let h = ConversationHistory::default();
        assert_eq!(
            render_tuned_prompt(&h, "Describe the Statue of Liberty").unwrap(),
            "Describe the Statue of Liberty"
        );
    }

    #[test]
    fn history_truncates_to_latest() {
        let mut h = ConversationHistory::new(1);
        h.push(Role::User, "first");
        h.push(Role::Assistant, "second");
        assert_eq!(h.len(), 1);
        let p = render_tuned_prompt(&h, "next").unwrap();
        assert!(!p.contains("first"));
        assert!(p.contains("Assistant: second"));
    }

    #[test]
    fn tuned_prompt_keeps_order() {
        let mut h = ConversationHistory::default();
        h.push(Role::User, "Describe the Statue of Liberty");
        h.push(Role::Assistant, "The Statue of Liberty is a copper statue in New York Harbor.");
        let p = render_tuned_prompt(&h, "show me a picture of it").unwrap();
        let a = p.find("The Statue of Liberty").unwrap();
        let b = p.find("show me a picture of it").unwrap();
        assert!(a < b);
    }
}
