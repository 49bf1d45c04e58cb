use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_record, CaptionInstruction, DatagenError};
use crate::model::{InstructionRecord, Modality};

const DEFAULT_FILTERS: &str = include_str!("../../assets/lexicons/filters.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub nonspeech_audio: Vec<String>,
    pub non_english_phrases: Vec<String>,
    /// Matched as `in <lang>` / `into <lang>`.
    pub languages: Vec<String>,
    pub dedup_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_FILTERS).expect("bundled filter lexicon")
    }
}

impl FilterConfig {
    pub fn from_file(path: &Path) -> Result<Self, DatagenError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatagenError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatagenError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Empty,
    Malformed,
    NonspeechAudio,
    NonEnglishSpeech,
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub empty: usize,
    pub malformed: usize,
    pub nonspeech_audio: usize,
    pub non_english_speech: usize,
    pub duplicate: usize,
    pub retained: usize,
}

impl FilterReport {
    pub fn removed(&self) -> usize {
        self.empty + self.malformed + self.nonspeech_audio + self.non_english_speech + self.duplicate
    }

    fn count(&mut self, reason: FilterReason) {
        match reason {
            FilterReason::Empty => self.empty += 1,
            FilterReason::Malformed => self.malformed += 1,
            FilterReason::NonspeechAudio => self.nonspeech_audio += 1,
            FilterReason::NonEnglishSpeech => self.non_english_speech += 1,
            FilterReason::Duplicate => self.duplicate += 1,
        }
    }

    pub fn merge(&mut self, other: &FilterReport) {
        self.input += other.input;
        self.empty += other.empty;
        self.malformed += other.malformed;
        self.nonspeech_audio += other.nonspeech_audio;
        self.non_english_speech += other.non_english_speech;
        self.duplicate += other.duplicate;
        self.retained += other.retained;
    }
}

/// Lowercase, punctuation replaced by spaces, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    text.chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_phrase(normalized: &str, phrase: &str) -> bool {
    let phrase = normalize(phrase);
    if phrase.is_empty() {
        return false;
    }
    let hay = format!(" {normalized} ");
    hay.contains(&format!(" {phrase} "))
}

/// Character trigrams of the normalized text; shorter strings are one gram.
pub fn trigrams(normalized: &str) -> HashSet<String> {
    let chars: Vec<char> = normalized.chars().collect();
    if chars.len() < 3 {
        return HashSet::from([normalized.to_string()]);
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Near-duplicate detector over retained texts, indexed by trigram.
struct DedupIndex {
    threshold: f64,
    grams: Vec<HashSet<String>>,
    postings: HashMap<String, Vec<usize>>,
}

impl DedupIndex {
    fn new(threshold: f64) -> Self {
        Self {
            threshold,
            grams: Vec::new(),
            postings: HashMap::new(),
        }
    }

    fn is_duplicate(&self, grams: &HashSet<String>) -> bool {
        let mut shared: HashMap<usize, usize> = HashMap::new();
        for g in grams {
            for &id in self.postings.get(g).into_iter().flatten() {
                *shared.entry(id).or_insert(0) += 1;
            }
        }
        shared.into_iter().any(|(id, inter)| {
            let union = grams.len() + self.grams[id].len() - inter;
            inter as f64 / union as f64 >= self.threshold
        })
    }

    fn insert(&mut self, grams: HashSet<String>) {
        let id = self.grams.len();
        for g in &grams {
            self.postings.entry(g.clone()).or_default().push(id);
        }
        self.grams.push(grams);
    }
}

fn classify(pair: &CaptionInstruction, modality: Modality, config: &FilterConfig) -> Option<FilterReason> {
    if pair.instruction.trim().is_empty() {
        return Some(FilterReason::Empty);
    }
    if pair.caption.trim().is_empty() || !pair.instruction.chars().any(char::is_alphanumeric) {
        return Some(FilterReason::Malformed);
    }
    if modality == Modality::Speech {
        let norm = normalize(&pair.instruction);
        if config.nonspeech_audio.iter().any(|p| contains_phrase(&norm, p)) {
            return Some(FilterReason::NonspeechAudio);
        }
        let foreign = config.non_english_phrases.iter().any(|p| contains_phrase(&norm, p))
            || config.languages.iter().any(|lang| {
                contains_phrase(&norm, &format!("in {lang}")) || contains_phrase(&norm, &format!("into {lang}"))
            });
        if foreign {
            return Some(FilterReason::NonEnglishSpeech);
        }
    }
    None
}

/// Applies the removal rules in order, attributing each removal to the first
/// rule that matches, and builds records from what survives.
pub fn filter_instructions(
    pairs: &[CaptionInstruction],
    modality: Modality,
    config: &FilterConfig,
) -> (Vec<InstructionRecord>, FilterReport) {
    let mut report = FilterReport {
        input: pairs.len(),
        ..FilterReport::default()
    };
    let mut index = DedupIndex::new(config.dedup_threshold);
    let mut retained = Vec::new();
    for pair in pairs {
        if let Some(reason) = classify(pair, modality, config) {
            report.count(reason);
            continue;
        }
        let grams = trigrams(&normalize(&pair.instruction));
        if index.is_duplicate(&grams) {
            report.count(FilterReason::Duplicate);
            continue;
        }
        match build_record(&pair.caption, &pair.instruction, modality) {
            Ok(record) => {
                index.insert(grams);
                retained.push(record);
            }
            Err(_) => report.count(FilterReason::Malformed),
        }
    }
    report.retained = retained.len();
    (retained, report)
}
