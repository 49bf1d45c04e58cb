use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use modalgate_core::backends::{BackendSet, MockChat};
use modalgate_core::datagen::{filter_instructions, CaptionInstruction, FilterConfig};
use modalgate_core::metrics::bleu;
use modalgate_core::model::{InstructionRecord, Modality, RecordSource, StructuredResponse};
use modalgate_core::parse::parse_structured_response;
use modalgate_core::prompting::ConversationHistory;
use modalgate_core::router::Router;

fn parser(c: &mut Criterion) {
    let mut g = c.benchmark_group("parse");
    let cases = [
        ("strict", r#"{"type": "image", "response": "The Great Wave off Kanagawa."}"#.to_string()),
        (
            "fenced_prose",
            "Sure! Here it is:\n```json\n{'type': 'audio', 'response': 'John',}\n```\nHope that helps.".to_string(),
        ),
        ("irreparable", "I am not sure how to format that.".repeat(20)),
    ];
    for (name, raw) in &cases {
        g.bench_with_input(BenchmarkId::from_parameter(name), raw, |b, raw| {
            b.iter(|| parse_structured_response(black_box(raw), true))
        });
    }
    g.finish();
}

fn bleu_scores(c: &mut Criterion) {
    let reference = "Peter Piper picked a peck of pickled peppers. A peck of pickled peppers Peter Piper picked.";
    let candidate = "Peter Piper picked a peck of pickled peppers; a peck of peppers Peter picked.";
    c.bench_function("bleu/sentence", |b| b.iter(|| bleu(black_box(candidate), &[black_box(reference)])));
    let long_ref = reference.repeat(20);
    let long_cand = candidate.repeat(20);
    c.bench_function("bleu/paragraph", |b| b.iter(|| bleu(black_box(&long_cand), &[black_box(&long_ref)])));
}

fn dedup(c: &mut Criterion) {
    let config = FilterConfig::default();
    for n in [500usize, 2000] {
        let pairs: Vec<CaptionInstruction> = (0..n)
            .map(|i| CaptionInstruction {
                caption: format!("a {} photo of object number {i}", ["small", "large", "bright"][i % 3]),
                instruction: format!("Please show me a picture of object {i} in {} light", ["morning", "evening"][i % 2]),
            })
            .collect();
        c.bench_with_input(BenchmarkId::new("filter", n), &pairs, |b, pairs| {
            b.iter(|| filter_instructions(black_box(pairs), Modality::Image, &config))
        });
    }
}

fn routing(c: &mut Criterion) {
    let record = InstructionRecord::new(
        "Can you show me the famous Japanese painting with a huge wave and Mount Fuji in the background?",
        StructuredResponse::new(Modality::Image, "The Great Wave off Kanagawa.").unwrap(),
        RecordSource::Human,
    )
    .unwrap();
    let instruction = record.instruction.clone();
    let set = BackendSet::mocks(Arc::new(MockChat::oracle(&[record])));
    let router = Router::from_backends(&set);
    let history = ConversationHistory::default();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    c.bench_function("route/mock_image", |b| {
        b.to_async(&rt).iter(|| router.route(black_box(&instruction), &history))
    });
}

criterion_group!(benches, parser, bleu_scores, dedup, routing);
criterion_main!(benches);
