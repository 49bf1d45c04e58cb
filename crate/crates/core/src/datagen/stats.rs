use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::InstructionRecord;

const DEFAULT_VERBS: &str = include_str!("../../assets/lexicons/verbs.txt");
const DEFAULT_NOUNS: &str = include_str!("../../assets/lexicons/nouns.txt");

pub const NONE_BUCKET: &str = "(none)";

/// Suffix rewrites tried in order when a token is not itself in a lexicon.
const SUFFIX_RULES: [(&str, &str); 8] = [
    ("ies", "y"),
    ("ied", "y"),
    ("ing", ""),
    ("ing", "e"),
    ("ed", ""),
    ("ed", "e"),
    ("es", ""),
    ("s", ""),
];

#[derive(Debug, Clone)]
pub struct Lexicon {
    words: HashSet<String>,
}

impl Lexicon {
    pub fn from_lines(text: &str) -> Self {
        Self {
            words: text
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect(),
        }
    }

    pub fn default_verbs() -> Self {
        Self::from_lines(DEFAULT_VERBS)
    }

    pub fn default_nouns() -> Self {
        Self::from_lines(DEFAULT_NOUNS)
    }

    /// The lexicon entry `token` reduces to, if any.
    pub fn lemma(&self, token: &str) -> Option<String> {
        if self.words.contains(token) {
            return Some(token.to_string());
        }
        SUFFIX_RULES.iter().find_map(|(suffix, repl)| {
            let stem = token.strip_suffix(suffix)?;
            let candidate = format!("{stem}{repl}");
            (!stem.is_empty() && self.words.contains(&candidate)).then_some(candidate)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounCount {
    pub noun: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbRow {
    pub verb: String,
    pub count: usize,
    pub nouns: Vec<NounCount>,
}

/// Root verb → object noun counts, verbs by descending count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbNounTable {
    pub total: usize,
    pub rows: Vec<VerbRow>,
}

impl VerbNounTable {
    pub fn count(&self, verb: &str, noun: &str) -> usize {
        self.rows
            .iter()
            .find(|r| r.verb == verb)
            .and_then(|r| r.nouns.iter().find(|n| n.noun == noun))
            .map_or(0, |n| n.count)
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// First verb-lexicon token, then the first noun-lexicon token after it.
pub fn root_verb_noun(instruction: &str, verbs: &Lexicon, nouns: &Lexicon) -> (String, String) {
    let tokens = words(instruction);
    let Some((pos, verb)) = tokens.iter().enumerate().find_map(|(i, t)| verbs.lemma(t).map(|v| (i, v))) else {
        return (NONE_BUCKET.into(), NONE_BUCKET.into());
    };
    let noun = tokens[pos + 1..]
        .iter()
        .find_map(|t| nouns.lemma(t))
        .unwrap_or_else(|| NONE_BUCKET.into());
    (verb, noun)
}

pub fn verb_noun_stats(records: &[InstructionRecord]) -> VerbNounTable {
    verb_noun_stats_with(records, &Lexicon::default_verbs(), &Lexicon::default_nouns())
}

pub fn verb_noun_stats_with(records: &[InstructionRecord], verbs: &Lexicon, nouns: &Lexicon) -> VerbNounTable {
    let mut cells: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        let (verb, noun) = root_verb_noun(&r.instruction, verbs, nouns);
        *cells.entry(verb).or_default().entry(noun).or_insert(0) += 1;
    }
    let mut rows: Vec<VerbRow> = cells
        .into_iter()
        .map(|(verb, nouns)| {
            let mut nouns: Vec<NounCount> = nouns.into_iter().map(|(noun, count)| NounCount { noun, count }).collect();
            nouns.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.noun.cmp(&b.noun)));
            VerbRow {
                count: nouns.iter().map(|n| n.count).sum(),
                verb,
                nouns,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.verb.cmp(&b.verb)));
    VerbNounTable {
        total: records.len(),
        rows,
    }
}
