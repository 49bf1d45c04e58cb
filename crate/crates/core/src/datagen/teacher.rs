use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tokio::time::Instant;

use super::{CaptionPool, DatagenError, SeedStore};
use crate::backends::{ChatBackend, ChatRequest};
use crate::digest::digest_u64;
use crate::model::{InstructionRecord, Modality};
use crate::prompting::{caption_line, render_teacher_prompt, MAX_TEACHER_CAPTIONS, TEACHER_SEEDS};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionInstruction {
    pub caption: String,
    pub instruction: String,
}

/// What could be recovered from one teacher reply.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherParse {
    pub pairs: Vec<CaptionInstruction>,
    /// Captions sent to the teacher with no usable instruction back.
    pub dropped: Vec<String>,
    /// Headers that matched no sent caption.
    pub orphans: Vec<String>,
}

fn strip_numbering(line: &str) -> &str {
    let t = line.trim_start();
    let t = t.strip_prefix(['-', '*', '•']).map(str::trim_start).unwrap_or(t);
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    let after_paren = t.strip_prefix('(').filter(|r| r.starts_with(|c: char| c.is_ascii_digit()));
    if let Some(rest) = after_paren {
        let d = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if let Some(r) = rest[d..].strip_prefix(')') {
            return r.trim_start();
        }
    }
    if digits > 0 {
        if let Some(r) = t[digits..].strip_prefix(['.', ')', ':']) {
            return r.trim_start();
        }
    }
    t
}

fn header(line: &str) -> Option<&str> {
    let t = strip_numbering(line).trim_end();
    let inner = t.strip_prefix('[')?;
    let end = inner.rfind(']')?;
    inner[end + 1..].trim().is_empty().then(|| &inner[..end])
}

fn instruction_line(line: &str) -> Option<&str> {
    let t = strip_numbering(line);
    let (label, rest) = t.split_once(':')?;
    let label = label.trim();
    (label.eq_ignore_ascii_case("instruction") || label.eq_ignore_ascii_case("instructions")).then(|| rest.trim())
}

/// Pairs `[caption]` headers with the `Instruction:` line that follows.
/// Headers are matched against `captions` by exact text after whitespace
/// normalization, so the output follows the reply's order. A caption is used
/// at most once.
pub fn parse_teacher_output(teacher_raw: &str, captions: &[String]) -> TeacherParse {
    let normalized: Vec<String> = captions.iter().map(|c| caption_line(c)).collect();
    let mut used = vec![false; captions.len()];
    let mut out = TeacherParse::default();

    let lines: Vec<&str> = teacher_raw.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let Some(h) = header(lines[i]) else {
            i += 1;
            continue;
        };
        let key = caption_line(h);
        i += 1;
        let mut instruction = None;
        while i < lines.len() && header(lines[i]).is_none() {
            if let Some(rest) = instruction_line(lines[i]) {
                if !rest.is_empty() {
                    instruction = Some(rest.to_string());
                } else {
                    instruction = lines[i + 1..]
                        .iter()
                        .map(|l| l.trim())
                        .find(|l| !l.is_empty())
                        .filter(|l| header(l).is_none())
                        .map(str::to_string);
                }
                i += 1;
                break;
            }
            i += 1;
        }
        let slot = (0..captions.len()).find(|&j| !used[j] && normalized[j] == key);
        match (slot, instruction) {
            (Some(j), Some(instruction)) => {
                used[j] = true;
                out.pairs.push(CaptionInstruction {
                    caption: captions[j].clone(),
                    instruction,
                });
            }
            (Some(_), None) => {}
            (None, _) => out.orphans.push(h.to_string()),
        }
    }
    out.dropped = captions
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|(c, _)| c.clone())
        .collect();
    out
}

/// One teacher call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenBatch {
    pub index: usize,
    pub seeds_used: Vec<String>,
    pub captions: Vec<String>,
    pub teacher_raw: String,
    pub parsed: Vec<CaptionInstruction>,
    pub dropped: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub batch_size: usize,
    /// Stop after this many batches; `None` runs until the pool is empty.
    pub max_batches: Option<usize>,
    pub concurrency: usize,
    /// Minimum spacing between teacher calls.
    pub min_interval: Duration,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            batch_size: MAX_TEACHER_CAPTIONS,
            max_batches: None,
            concurrency: 2,
            min_interval: Duration::ZERO,
            temperature: 1.0,
            max_new_tokens: 4096,
        }
    }
}

struct Planned {
    index: usize,
    seeds: Vec<InstructionRecord>,
    seed_ids: Vec<String>,
    captions: Vec<String>,
}

fn batch_seed(rng_seed: u64, index: usize) -> u64 {
    digest_u64(format!("{rng_seed}:{index}").as_bytes())
}

/// Samples batches sequentially from the pool, then runs up to
/// `concurrency` teacher calls at a time. Batch order in the output follows
/// sampling order regardless of completion order. A failed call yields a
/// batch with `error` set and nothing parsed.
pub async fn run_generation(
    pool: &mut CaptionPool,
    seeds: &SeedStore,
    teacher: Arc<dyn ChatBackend>,
    config: &GenConfig,
    rng_seed: u64,
) -> Result<Vec<GenBatch>, DatagenError> {
    let modality = pool.modality();
    let candidates = seeds.for_modality(modality);
    if candidates.len() < TEACHER_SEEDS {
        return Err(DatagenError::NotEnoughSeeds {
            modality,
            have: candidates.len(),
        });
    }
    if config.batch_size == 0 || config.batch_size > MAX_TEACHER_CAPTIONS || config.concurrency == 0 {
        return Err(DatagenError::InvalidConfig(format!(
            "batch_size must be 1..={MAX_TEACHER_CAPTIONS} and concurrency >= 1"
        )));
    }

    let mut planned = Vec::new();
    while pool.remaining() > 0 && config.max_batches.is_none_or(|m| planned.len() < m) {
        let index = planned.len();
        let seed = batch_seed(rng_seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = sample_indices(&mut rng, candidates.len(), TEACHER_SEEDS);
        let chosen: Vec<&_> = picks.iter().map(|i| candidates[i]).collect();
        let captions = pool.sample(config.batch_size.min(pool.remaining()), seed)?;
        planned.push(Planned {
            index,
            seeds: chosen.iter().map(|s| s.record.clone()).collect(),
            seed_ids: chosen.iter().map(|s| s.id.clone()).collect(),
            captions,
        });
    }

    let gate = Arc::new(Mutex::new(None::<Instant>));
    let batches = stream::iter(planned)
        .map(|p| {
            let teacher = teacher.clone();
            let gate = gate.clone();
            async move { run_batch(p, modality, teacher.as_ref(), config, &gate).await }
        })
        .buffered(config.concurrency)
        .collect::<Vec<_>>()
        .await;
    Ok(batches)
}

async fn run_batch(
    p: Planned,
    modality: Modality,
    teacher: &dyn ChatBackend,
    config: &GenConfig,
    gate: &Mutex<Option<Instant>>,
) -> GenBatch {
    let mut batch = GenBatch {
        index: p.index,
        seeds_used: p.seed_ids,
        captions: p.captions,
        teacher_raw: String::new(),
        parsed: Vec::new(),
        dropped: Vec::new(),
        error: None,
    };
    let prompt = match render_teacher_prompt(&p.seeds, &batch.captions, modality) {
        Ok(prompt) => prompt,
        Err(e) => {
            batch.error = Some(e.to_string());
            batch.dropped = batch.captions.clone();
            return batch;
        }
    };
    if !config.min_interval.is_zero() {
        let mut last = gate.lock().await;
        if let Some(t) = *last {
            tokio::time::sleep_until(t + config.min_interval).await;
        }
        *last = Some(Instant::now());
    }
    let req = ChatRequest {
        prompt,
        temperature: config.temperature,
        max_new_tokens: config.max_new_tokens,
    };
    match teacher.complete_chat(&req).await {
        Ok(reply) => {
            let parsed = parse_teacher_output(&reply.text, &batch.captions);
            if !parsed.dropped.is_empty() {
                tracing::info!(
                    batch = batch.index,
                    dropped = parsed.dropped.len(),
                    "teacher returned fewer instructions than captions"
                );
            }
            batch.teacher_raw = reply.text;
            batch.parsed = parsed.pairs;
            batch.dropped = parsed.dropped;
        }
        Err(e) => {
            tracing::warn!(batch = batch.index, error = %e, "teacher call failed");
            batch.error = Some(e.to_string());
            batch.dropped = batch.captions.clone();
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, MockChat};
    use crate::datagen::SeedInstruction;
    use crate::model::{RecordSource, StructuredResponse};

    fn caps(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn seeds(modality: Modality, n: usize) -> SeedStore {
        SeedStore::new(
            (0..n)
                .map(|i| SeedInstruction {
                    id: format!("s{i}"),
                    record: InstructionRecord::new(
                        format!("seed instruction {i}"),
                        StructuredResponse::new(modality, format!("seed caption {i}")).unwrap(),
                        RecordSource::Seed,
                    )
                    .unwrap(),
                    tags: Default::default(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_riddle_example() {
        let raw = "[A photo of avocado]\nInstruction: Visualize the answer to this riddle: what is green outside and has a big seed inside?";
        let out = parse_teacher_output(raw, &caps(&["A photo of avocado"]));
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].caption, "A photo of avocado");
        assert!(out.pairs[0].instruction.starts_with("Visualize the answer to this riddle:"));
        assert!(out.dropped.is_empty());
    }

    #[test]
    fn header_without_instruction_is_dropped() {
        let raw = "[a cat]\n\n[a dog]\nInstruction: Draw a loyal pet.";
        let out = parse_teacher_output(raw, &caps(&["a cat", "a dog"]));
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].caption, "a dog");
        assert_eq!(out.dropped, ["a cat"]);
    }

    #[test]
    fn numbering_and_plural_label() {
        let raw = "1. [a  red   bus]\n1. Instructions: Show me public transport.\n(2) [a tree]\nInstruction:\nPaint something green.";
        let out = parse_teacher_output(raw, &caps(&["a red bus", "a tree", "unused"]));
        assert_eq!(
            out.pairs,
            vec![
                CaptionInstruction {
                    caption: "a red bus".into(),
                    instruction: "Show me public transport.".into()
                },
                CaptionInstruction {
                    caption: "a tree".into(),
                    instruction: "Paint something green.".into()
                },
            ]
        );
        assert_eq!(out.dropped, ["unused"]);
    }

    #[test]
    fn pairs_follow_header_order() {
        let sent = caps(&["first caption", "second caption", "third caption"]);
        let raw = "[third caption]\nInstruction: c\n[first caption]\nInstruction: a\n[nonexistent]\nInstruction: z\n[second caption]\nInstruction: b";
        let out = parse_teacher_output(raw, &sent);
        // oracle: walk headers, keep those whose text is in the sent set
        let headers: Vec<&str> = raw.lines().filter_map(header).collect();
        let expected: Vec<&str> = headers.into_iter().filter(|h| sent.iter().any(|c| c == h)).collect();
        let got: Vec<&str> = out.pairs.iter().map(|p| p.caption.as_str()).collect();
        assert_eq!(got, expected);
        assert_eq!(out.orphans, ["nonexistent"]);
        let instr: Vec<&str> = out.pairs.iter().map(|p| p.instruction.as_str()).collect();
        assert_eq!(instr, ["c", "a", "b"]);
    }

    #[test]
    fn bracketed_text_inside_caption() {
        let out = parse_teacher_output(
            "[Poster [draft] for a fair]\nInstruction: Make a fair poster.",
            &caps(&["Poster [draft] for a fair"]),
        );
        assert_eq!(out.pairs.len(), 1);
    }

    #[tokio::test]
    async fn time_travel_example() {
        let caption = "A black metal bicycle with a clock inside the front wheel";
        let instruction = "Can you generate an image that represents the concepts of 'time travel', using everyday objects such as a bicycle and a clock?";
        let mut pool = CaptionPool::new(Modality::Image, caps(&[caption]), "t").unwrap();
        let teacher = MockChat::scripted([format!("[{caption}]\nInstruction: {instruction}")]);
        let batches = run_generation(&mut pool, &seeds(Modality::Image, 3), Arc::new(teacher), &GenConfig::default(), 1)
            .await
            .unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(
            batches[0].parsed,
            vec![CaptionInstruction {
                caption: caption.into(),
                instruction: instruction.into()
            }]
        );
        assert_eq!(batches[0].seeds_used.len(), 3);
    }

    #[tokio::test]
    async fn short_reply_reports_shortfall() {
        let mut pool = CaptionPool::new(Modality::Image, caps(&["a", "b", "c"]), "t").unwrap();
        let teacher = MockChat::from_fn("short", |req| {
            let first = req.prompt.lines().rev().find(|l| l.starts_with('[')).unwrap().to_string();
            Ok(format!("{first}\nInstruction: only one"))
        });
        let b = run_generation(&mut pool, &seeds(Modality::Image, 4), Arc::new(teacher), &GenConfig::default(), 9)
            .await
            .unwrap();
        assert_eq!(b[0].parsed.len(), 1);
        assert_eq!(b[0].dropped.len(), 2);
        assert!(b[0].parsed.len() < b[0].captions.len());
    }

    #[tokio::test]
    async fn transport_failure_is_not_fatal() {
        let mut pool = CaptionPool::new(Modality::Speech, (0..5).map(|i| format!("c{i}")).collect(), "t").unwrap();
        let teacher = MockChat::scripted_results([
            Err(BackendError::Transport("connection refused".into())),
            Ok("[c0]\nInstruction: say it".to_string()),
        ]);
        let cfg = GenConfig {
            batch_size: 3,
            concurrency: 1,
            ..GenConfig::default()
        };
        let b = run_generation(&mut pool, &seeds(Modality::Speech, 3), Arc::new(teacher), &cfg, 0)
            .await
            .unwrap();
        assert_eq!(b.len(), 2);
        assert!(b[0].error.as_deref().unwrap().contains("connection refused"));
        assert!(b[0].parsed.is_empty());
        assert_eq!(b[0].dropped.len(), 3);
        assert!(b[1].error.is_none());
    }

    #[tokio::test]
    async fn needs_three_seeds_of_the_modality() {
        let mut pool = CaptionPool::new(Modality::Image, caps(&["a"]), "t").unwrap();
        let err = run_generation(
            &mut pool,
            &seeds(Modality::Speech, 5),
            Arc::new(MockChat::teacher()),
            &GenConfig::default(),
            0,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, DatagenError::NotEnoughSeeds { have: 0, .. }));
    }

    #[tokio::test]
    async fn rate_limit_spaces_calls() {
        let mut pool = CaptionPool::new(Modality::Image, (0..3).map(|i| format!("c{i}")).collect(), "t").unwrap();
        let cfg = GenConfig {
            batch_size: 1,
            min_interval: Duration::from_millis(30),
            ..GenConfig::default()
        };
        let start = std::time::Instant::now();
        let b = run_generation(&mut pool, &seeds(Modality::Image, 3), Arc::new(MockChat::teacher()), &cfg, 0)
            .await
            .unwrap();
        assert_eq!(b.len(), 3);
        assert!(start.elapsed() >= Duration::from_millis(60));
        assert!(b.iter().all(|x| x.parsed.len() == 1));
    }
}
