//! Fault-tolerant extraction of structured responses from raw model text.
//!
//! The pipeline is extract → repair → strict parse → canonicalize → validate.
//! Every repair that changes the candidate is recorded as a [`RepairTag`] so
//! callers can tell a clean answer from a salvaged one.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Modality, ModelError, StructuredResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairTag {
    OuterQuotes,
    SingleQuotes,
    TrailingComma,
    UnescapedQuotes,
    DuplicateKeys,
    ExtraKeys,
    NonStringResponse,
    Unrecoverable,
    TextFallback,
}

impl fmt::Display for RepairTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RepairTag::OuterQuotes => "outer-quotes",
            RepairTag::SingleQuotes => "single-quotes",
            RepairTag::TrailingComma => "trailing-comma",
            RepairTag::UnescapedQuotes => "unescaped-quotes",
            RepairTag::DuplicateKeys => "duplicate-keys",
            RepairTag::ExtraKeys => "extra-keys",
            RepairTag::NonStringResponse => "non-string-response",
            RepairTag::Unrecoverable => "unrecoverable",
            RepairTag::TextFallback => "text-fallback",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no brace-delimited object found")]
    NoStructuredBlock,
    #[error("irreparable object: {0}")]
    Irreparable(String),
    #[error("missing or non-string field {0:?}")]
    MissingField(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of running the full parse pipeline over one model reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub result: Option<StructuredResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub repairs_applied: Vec<RepairTag>,
    pub fell_back_to_text: bool,
    pub raw: String,
}

impl ParseOutcome {
    pub fn is_success(&self) -> bool {
        self.result.is_some() && !self.fell_back_to_text
    }

    pub fn modality(&self) -> Option<Modality> {
        self.result.as_ref().map(StructuredResponse::modality)
    }
}

/// Output of [`repair_structured_text`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repaired {
    pub text: String,
    pub tags: Vec<RepairTag>,
}

/// End offset (exclusive) of the object starting at `text[0] == '{'`.
fn balanced_end(text: &str, string_aware: bool) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' if string_aware => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// All balanced brace-delimited candidates, in order of their opening brace.
/// Candidates nested inside an earlier one are skipped.
pub fn structured_candidates(raw: &str) -> impl Iterator<Item = &str> + '_ {
    let mut covered_until = 0usize;
    raw.match_indices('{').filter_map(move |(start, _)| {
        if start < covered_until {
            return None;
        }
        let rest = &raw[start..];
        let end = balanced_end(rest, true).or_else(|| balanced_end(rest, false))?;
        covered_until = start + end;
        Some(&rest[..end])
    })
}

/// The first balanced object in `raw`, ignoring surrounding prose and code
/// fences.
pub fn extract_structured_block(raw: &str) -> Option<&str> {
    structured_candidates(raw).next()
}

fn strip_outer_quotes(text: &str) -> Option<&str> {
    let t = text.trim();
    for q in ['\'', '`'] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            let inner = t[1..t.len() - 1].trim();
            if inner.starts_with('{') && inner.ends_with('}') {
                return Some(inner);
            }
        }
    }
    None
}

fn previous_significant(out: &str) -> Option<char> {
    out.chars().rev().find(|c| !c.is_whitespace())
}

fn next_significant(chars: &[char], from: usize) -> Option<char> {
    chars[from..].iter().copied().find(|c| !c.is_whitespace())
}

/// Rewrites `'...'` tokens that sit at a key or value position into JSON
/// strings. A quote only closes when followed by a structural character, so
/// apostrophes inside the string survive.
fn convert_single_quotes(text: &str) -> (String, bool) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut changed = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' {
            // copy a double-quoted string verbatim
            out.push(c);
            i += 1;
            let mut escaped = false;
            while i < chars.len() {
                let d = chars[i];
                out.push(d);
                i += 1;
                if escaped {
                    escaped = false;
                } else if d == '\\' {
                    escaped = true;
                } else if d == '"' {
                    break;
                }
            }
            continue;
        }
        if c == '\'' && matches!(previous_significant(&out), Some('{' | '[' | ',' | ':')) {
            let close = (i + 1..chars.len()).find(|&j| {
                chars[j] == '\''
                    && chars[j - 1] != '\\'
                    && matches!(next_significant(&chars, j + 1), Some(':' | ',' | '}' | ']'))
            });
            if let Some(j) = close {
                out.push('"');
                let mut k = i + 1;
                while k < j {
                    let d = chars[k];
                    if d == '\\' && k + 1 < j && chars[k + 1] == '\'' {
                        out.push('\'');
                        k += 2;
                        continue;
                    }
                    if d == '"' {
                        out.push_str("\\\"");
                    } else {
                        out.push(d);
                    }
                    k += 1;
                }
                out.push('"');
                changed = true;
                i = j + 1;
                continue;
            }
        }
        out.push(c);
        i += 1;
    }
    (out, changed)
}

fn remove_trailing_commas(text: &str) -> (String, bool) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut changed = false;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == ',' && matches!(next_significant(&chars, i + 1), Some('}' | ']')) {
            changed = true;
            continue;
        }
        out.push(c);
    }
    (out, changed)
}

/// An object's members in source order, duplicates included.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct OrderedPairs(pub Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedPairs {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PairsVisitor;

        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = OrderedPairs;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut pairs = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    pairs.push((k, v));
                }
                Ok(OrderedPairs(pairs))
            }
        }

        deserializer.deserialize_map(PairsVisitor)
    }
}

fn strict_pairs(text: &str) -> Result<OrderedPairs, serde_json::Error> {
    serde_json::from_str::<OrderedPairs>(text)
}

fn unescape_quotes(text: &str) -> Option<String> {
    if text.contains("\\\"") {
        let candidate = text.replace("\\\"", "\"");
        if strict_pairs(&candidate).is_ok() {
            return Some(candidate);
        }
    }
    if text.contains("\"\"") {
        let candidate = text.replace("\"\"", "\"");
        if strict_pairs(&candidate).is_ok() {
            return Some(candidate);
        }
    }
    None
}

fn pairs_to_json(pairs: &[(String, Value)]) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in pairs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&Value::String(k.clone()).to_string());
        out.push(':');
        out.push_str(&v.to_string());
    }
    out.push('}');
    out
}

/// Applies the fixed sequence of textual repairs to a brace-balanced
/// candidate. Each repair is idempotent and only tagged when it changed
/// something.
pub fn repair_structured_text(candidate: &str) -> Result<Repaired, ParseError> {
    let mut tags = Vec::new();
    let mut text = candidate.trim().to_string();

    if let Some(inner) = strip_outer_quotes(&text) {
        text = inner.to_string();
        tags.push(RepairTag::OuterQuotes);
    }

    let (converted, changed) = convert_single_quotes(&text);
    if changed {
        text = converted;
        tags.push(RepairTag::SingleQuotes);
    }

    let (trimmed, changed) = remove_trailing_commas(&text);
    if changed {
        text = trimmed;
        tags.push(RepairTag::TrailingComma);
    }

    if strict_pairs(&text).is_err() {
        if let Some(unescaped) = unescape_quotes(&text) {
            text = unescaped;
            tags.push(RepairTag::UnescapedQuotes);
        }
    }

    let pairs = strict_pairs(&text).map_err(|e| ParseError::Irreparable(e.to_string()))?;
    let total = pairs.0.len();
    let mut kept: Vec<(String, Value)> = Vec::with_capacity(total);
    for (k, v) in pairs.0 {
        if !kept.iter().any(|(seen, _)| *seen == k) {
            kept.push((k, v));
        }
    }
    if kept.len() != total {
        text = pairs_to_json(&kept);
        tags.push(RepairTag::DuplicateKeys);
    }

    Ok(Repaired { text, tags })
}

fn field_as_response(value: &Value, tags: &mut Vec<RepairTag>) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => {
            tags.push(RepairTag::NonStringResponse);
            Some(n.to_string())
        }
        Value::Bool(b) => {
            tags.push(RepairTag::NonStringResponse);
            Some(b.to_string())
        }
        _ => None,
    }
}

/// Validates a repaired object as a structured response.
fn validate(repaired: &Repaired) -> Result<(StructuredResponse, Vec<RepairTag>), ParseError> {
    let pairs = strict_pairs(&repaired.text).map_err(|e| ParseError::Irreparable(e.to_string()))?;
    let mut tags = repaired.tags.clone();
    let mut modality = None;
    let mut response = None;
    let mut extra = false;
    for (k, v) in &pairs.0 {
        match k.as_str() {
            "type" => modality = v.as_str().map(str::to_string),
            "response" => response = field_as_response(v, &mut tags),
            _ => extra = true,
        }
    }
    let modality = modality.ok_or(ParseError::MissingField("type"))?;
    let response = response.ok_or(ParseError::MissingField("response"))?;
    let modality = Modality::canonicalize(&modality)?;
    let sr = StructuredResponse::new(modality, response)?;
    if extra {
        tracing::warn!("structured response carried extra keys; ignored");
        tags.push(RepairTag::ExtraKeys);
    }
    Ok((sr, tags))
}

/// Strict-or-repaired parse of a single candidate string, without fallback.
pub fn parse_candidate(candidate: &str) -> Result<(StructuredResponse, Vec<RepairTag>), ParseError> {
    let repaired = repair_structured_text(candidate)?;
    validate(&repaired)
}

/// Runs the full pipeline over raw model text. Never panics; with
/// `fallback_to_text` set, unparseable text becomes a text response.
pub fn parse_structured_response(raw: &str, fallback_to_text: bool) -> ParseOutcome {
    let mut error = ParseError::NoStructuredBlock;
    for candidate in structured_candidates(raw) {
        match parse_candidate(candidate) {
            Ok((result, repairs_applied)) => {
                return ParseOutcome {
                    result: Some(result),
                    failure: None,
                    repairs_applied,
                    fell_back_to_text: false,
                    raw: raw.to_string(),
                }
            }
            Err(e) => {
                if error == ParseError::NoStructuredBlock {
                    error = e;
                }
            }
        }
    }

    let mut repairs_applied = vec![RepairTag::Unrecoverable];
    let fallback = if fallback_to_text {
        StructuredResponse::text(raw.trim()).ok()
    } else {
        None
    };
    let fell_back_to_text = fallback.is_some();
    if fell_back_to_text {
        repairs_applied.push(RepairTag::TextFallback);
    }
    ParseOutcome {
        result: fallback,
        failure: Some(error.to_string()),
        repairs_applied,
        fell_back_to_text,
        raw: raw.to_string(),
    }
}
