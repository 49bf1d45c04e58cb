use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::DatagenError;
use crate::model::{InstructionRecord, Modality, RecordSource};

/// Captions from a modality dataset, drawn without replacement.
#[derive(Debug, Clone)]
pub struct CaptionPool {
    modality: Modality,
    captions: Vec<String>,
    source_name: String,
    remaining: Vec<usize>,
}

impl CaptionPool {
    pub fn new(
        modality: Modality,
        captions: Vec<String>,
        source_name: impl Into<String>,
    ) -> Result<Self, DatagenError> {
        if modality == Modality::Text {
            return Err(DatagenError::TextPool);
        }
        if captions.is_empty() {
            return Err(DatagenError::EmptyPool);
        }
        let remaining = (0..captions.len()).collect();
        Ok(Self {
            modality,
            captions,
            source_name: source_name.into(),
            remaining,
        })
    }

    /// Plain text (one caption per line) or JSON lines with a `caption`
    /// field. Blank lines are skipped.
    pub fn from_file(modality: Modality, path: &Path) -> Result<Self, DatagenError> {
        #[derive(Deserialize)]
        struct Line {
            caption: String,
        }
        let text = std::fs::read_to_string(path).map_err(|e| DatagenError::io(path, e))?;
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .collect();
        let jsonl = lines.first().is_some_and(|(_, l)| l.trim_start().starts_with('{'));
        let mut captions = Vec::with_capacity(lines.len());
        for (i, line) in lines {
            if jsonl {
                let parsed: Line = serde_json::from_str(line).map_err(|e| DatagenError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                captions.push(parsed.caption);
            } else {
                captions.push(line.trim().to_string());
            }
        }
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(modality, captions, name)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.remaining.len()
    }

    /// Draws `n` unused captions. The draw depends only on the set of unused
    /// captions and `rng_seed`.
    pub fn sample(&mut self, n: usize, rng_seed: u64) -> Result<Vec<String>, DatagenError> {
        if n == 0 {
            return Err(DatagenError::InvalidConfig("sample size must be at least 1".into()));
        }
        if n > self.remaining.len() {
            return Err(DatagenError::PoolExhausted {
                requested: n,
                remaining: self.remaining.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (picked, _) = self.remaining.partial_shuffle(&mut rng, n);
        let picked: Vec<usize> = picked.to_vec();
        let taken: BTreeSet<usize> = picked.iter().copied().collect();
        self.remaining.retain(|i| !taken.contains(i));
        self.remaining.sort_unstable();
        Ok(picked.into_iter().map(|i| self.captions[i].clone()).collect())
    }
}

/// A hand-written example shown to the teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedInstruction {
    pub id: String,
    pub record: InstructionRecord,
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SeedStore {
    seeds: Vec<SeedInstruction>,
}

impl SeedStore {
    pub fn new(seeds: Vec<SeedInstruction>) -> Result<Self, DatagenError> {
        if let Some(s) = seeds.iter().find(|s| s.record.output.modality() == Modality::Text) {
            return Err(DatagenError::TextSeed(s.id.clone()));
        }
        Ok(Self { seeds })
    }

    /// Corpus-format lines plus optional `id` and `tags`. Ids default to
    /// `seed-<line>`.
    pub fn from_file(path: &Path) -> Result<Self, DatagenError> {
        #[derive(Deserialize)]
        struct Extra {
            #[serde(default)]
            id: Option<String>,
            #[serde(default)]
            tags: BTreeSet<String>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| DatagenError::io(path, e))?;
        let mut seeds = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| DatagenError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let mut record: InstructionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            record.source = RecordSource::Seed;
            let extra: Extra = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            seeds.push(SeedInstruction {
                id: extra.id.unwrap_or_else(|| format!("seed-{}", i + 1)),
                record,
                tags: extra.tags,
            });
        }
        Self::new(seeds)
    }

    pub fn for_modality(&self, modality: Modality) -> Vec<&SeedInstruction> {
        self.seeds
            .iter()
            .filter(|s| s.record.output.modality() == modality)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pool(n: usize) -> CaptionPool {
        CaptionPool::new(Modality::Image, (0..n).map(|i| format!("caption {i}")).collect(), "t").unwrap()
    }

    #[test]
    fn ten_disjoint_batches_cover_the_pool() {
        let mut p = pool(600);
        let mut seen = HashSet::new();
        for call in 0..10 {
            let batch = p.sample(60, call).unwrap();
            assert_eq!(batch.len(), 60);
            for c in batch {
                assert!(seen.insert(c));
            }
        }
        assert_eq!(seen.len(), 600);
        assert!(matches!(p.sample(1, 0), Err(DatagenError::PoolExhausted { remaining: 0, .. })));
    }

    #[test]
    fn oversized_request() {
        let mut p = pool(5);
        assert!(matches!(
            p.sample(6, 1),
            Err(DatagenError::PoolExhausted {
                requested: 6,
                remaining: 5
            })
        ));
        assert_eq!(p.remaining(), 5);
    }

    #[test]
    fn same_seed_same_batch() {
        assert_eq!(pool(100).sample(10, 42).unwrap(), pool(100).sample(10, 42).unwrap());
        assert_ne!(pool(100).sample(10, 42).unwrap(), pool(100).sample(10, 43).unwrap());
    }

    #[test]
    fn text_and_empty_pools_rejected() {
        assert!(matches!(
            CaptionPool::new(Modality::Text, vec!["x".into()], "t"),
            Err(DatagenError::TextPool)
        ));
        assert!(matches!(
            CaptionPool::new(Modality::Speech, vec![], "t"),
            Err(DatagenError::EmptyPool)
        ));
    }

    #[test]
    fn loads_text_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("caps.txt");
        std::fs::write(&txt, "A photo of avocado\n\n  A red bus  \n").unwrap();
        let p = CaptionPool::from_file(Modality::Image, &txt).unwrap();
        assert_eq!(p.captions(), ["A photo of avocado", "A red bus"]);
        let jl = dir.path().join("caps.jsonl");
        std::fs::write(&jl, "{\"caption\": \"John\"}\n{\"caption\": \"McDonald's\", \"id\": 3}\n").unwrap();
        let p = CaptionPool::from_file(Modality::Speech, &jl).unwrap();
        assert_eq!(p.captions(), ["John", "McDonald's"]);
        assert_eq!(p.source_name(), "caps.jsonl");
    }
}
