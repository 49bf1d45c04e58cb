//! Canonical domain types shared by every stage of the gateway.
//!
//! The contract between the language model and the router is a flat object
//! with exactly two keys, `type` and `response`. The `type` field names the
//! output modality; the `response` field carries the final answer (text
//! route), the conversion prompt (image route) or the verbatim utterance
//! (speech route).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("response is empty")]
    EmptyResponse,
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("image record {0:?} in a validation corpus has no image_id")]
    MissingImageId(String),
}

/// One of the three output routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
    Speech,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Speech];

    /// Canonicalize a raw `type` value. `audio` is an alias for `speech`.
    pub fn canonicalize(raw: &str) -> Result<Self, ModelError> {
        match raw.trim().to_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "speech" | "audio" => Ok(Modality::Speech),
            _ => Err(ModelError::UnknownModality(raw.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Speech => "speech",
        }
    }

    /// Wire spelling under a serialization profile.
    pub fn wire_name(self, profile: WireProfile) -> &'static str {
        match (self, profile) {
            (Modality::Speech, WireProfile::Audio) => "audio",
            _ => self.as_str(),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Speech => 2,
        }
    }
}

pub fn canonicalize_modality(raw: &str) -> Result<Modality, ModelError> {
    Modality::canonicalize(raw)
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::canonicalize(s)
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Modality::canonicalize(&raw).map_err(D::Error::custom)
    }
}

/// How the speech modality is spelled on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireProfile {
    /// `"speech"`
    #[default]
    Speech,
    /// `"audio"`, as used by the seed and few-shot listings.
    Audio,
}

/// The `(response, type)` pair emitted by the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StructuredResponse {
    modality: Modality,
    response: String,
}

impl StructuredResponse {
    pub fn new(modality: Modality, response: impl Into<String>) -> Result<Self, ModelError> {
        let response = response.into();
        if response.trim().is_empty() {
            return Err(ModelError::EmptyResponse);
        }
        Ok(Self { modality, response })
    }

    pub fn text(response: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(Modality::Text, response)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn to_value(&self, profile: WireProfile) -> serde_json::Value {
        serde_json::json!({
            "type": self.modality.wire_name(profile),
            "response": self.response,
        })
    }

    /// Compact JSON with keys in `type`, `response` order.
    pub fn to_json(&self, profile: WireProfile) -> String {
        self.to_value(profile).to_string()
    }
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    #[serde(rename = "type")]
    modality: Modality,
    response: String,
}

impl Serialize for StructuredResponse {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireResponse {
            modality: self.modality,
            response: self.response.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StructuredResponse {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireResponse::deserialize(deserializer)?;
        StructuredResponse::new(wire.modality, wire.response).map_err(D::Error::custom)
    }
}

/// Where an instruction record came from. Not part of the corpus wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordSource {
    Seed,
    Teacher,
    #[default]
    Human,
    SampledBenchmark,
}

/// One instruction with its ground-truth structured output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionRecord {
    pub instruction: String,
    pub output: StructuredResponse,
    pub image_id: Option<String>,
    pub source: RecordSource,
}

impl InstructionRecord {
    pub fn new(
        instruction: impl Into<String>,
        output: StructuredResponse,
        source: RecordSource,
    ) -> Result<Self, ModelError> {
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(ModelError::EmptyInstruction);
        }
        Ok(Self {
            instruction,
            output,
            image_id: None,
            source,
        })
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = Some(image_id.into());
        self
    }

    /// Extra constraint for validation records: image targets must name a
    /// reference image.
    pub fn validate_for_validation(&self) -> Result<(), ModelError> {
        if self.output.modality() == Modality::Image && self.image_id.is_none() {
            return Err(ModelError::MissingImageId(self.instruction.clone()));
        }
        Ok(())
    }

    pub fn to_value(&self, profile: WireProfile) -> serde_json::Value {
        let mut output = self.output.to_value(profile);
        if let Some(id) = &self.image_id {
            output["image_id"] = serde_json::Value::String(id.clone());
        }
        serde_json::json!({
            "instruction": self.instruction,
            "output": output,
        })
    }

    /// One corpus line (no trailing newline).
    pub fn to_json_line(&self, profile: WireProfile) -> String {
        self.to_value(profile).to_string()
    }
}

#[derive(Deserialize)]
struct WireOutput {
    #[serde(rename = "type")]
    modality: Modality,
    response: String,
    #[serde(default)]
    image_id: Option<String>,
}

#[derive(Deserialize)]
struct WireRecord {
    instruction: String,
    output: WireOutput,
}

impl<'de> Deserialize<'de> for InstructionRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireRecord::deserialize(deserializer)?;
        let output =
            StructuredResponse::new(wire.output.modality, wire.output.response).map_err(D::Error::custom)?;
        let mut record =
            InstructionRecord::new(wire.instruction, output, RecordSource::default()).map_err(D::Error::custom)?;
        record.image_id = wire.output.image_id;
        Ok(record)
    }
}

impl Serialize for InstructionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value(WireProfile::Speech).serialize(serializer)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// Read a JSON-lines corpus. Blank lines are skipped.
pub fn read_corpus(path: &Path, source: RecordSource) -> Result<Vec<InstructionRecord>, CorpusError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: InstructionRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.source = source;
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus<W: Write>(
    mut out: W,
    records: &[InstructionRecord],
    profile: WireProfile,
) -> std::io::Result<()> {
    for record in records {
        writeln!(out, "{}", record.to_json_line(profile))?;
    }
    Ok(())
}
