use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Duration;

use modalgate_core::backends::BackendSet;
use modalgate_core::datagen::{
    generate_corpus, mix_corpora, verb_noun_stats_with, CaptionPool, DatasetManifest, FilterConfig, GenConfig,
    GenerateJob, Lexicon, MixRatios, SeedStore, TrainingEcho,
};
use modalgate_core::eval::{compare_systems, read_report, run_eval, EvalSpec};
use modalgate_core::model::{read_corpus, Modality, RecordSource};
use modalgate_core::prompting::{ConversationHistory, Turn, DEFAULT_MAX_TURNS};
use modalgate_core::router::{Router, RouterConfig};
use modalgate_service::{ArtifactStore, ServiceConfig};

use crate::args::{CompareArgs, DatagenArgs, EvalArgs, RespondArgs, ServeArgs, StatsArgs};
use crate::{emit, CliError};

fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required --{flag} (flag or config key)")))
}

fn read_lines(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub async fn serve(args: ServeArgs) -> Result<(), CliError> {
    let mut merged = serde_json::to_value(ServiceConfig::default()).expect("config serializes");
    let serde_json::Value::Object(flags) = serde_json::to_value(&args).expect("args serialize") else {
        unreachable!()
    };
    for (k, v) in flags {
        if !v.is_null() {
            merged[k] = v;
        }
    }
    let config: ServiceConfig = serde_json::from_value(merged).map_err(|e| CliError::Usage(e.to_string()))?;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    modalgate_service::serve(config).await.map_err(CliError::runtime)
}

fn read_history(path: &Path, max_turns: usize) -> Result<ConversationHistory, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut turns = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let turn: Turn = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        turns.push(turn);
    }
    Ok(ConversationHistory::from_turns(turns, max_turns))
}

pub async fn respond(args: RespondArgs) -> Result<(), CliError> {
    let instruction = required(args.instruction, "instruction")?;
    let llm = required(args.llm, "llm")?;
    let oracle = match &args.oracle_corpus {
        Some(p) => read_corpus(p, RecordSource::Human).map_err(CliError::runtime)?,
        None => Vec::new(),
    };
    let backends = BackendSet::resolve(&llm, args.image.as_deref(), args.speech.as_deref(), None, &oracle, None)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let defaults = RouterConfig::default();
    let config = RouterConfig {
        policy: args.policy.unwrap_or(defaults.policy),
        temperature: args.temperature.unwrap_or(defaults.temperature),
        max_new_tokens: args.max_new_tokens.unwrap_or(defaults.max_new_tokens),
        fallback_to_text: !args.no_fallback,
        max_reasks: args.max_reasks.unwrap_or(defaults.max_reasks),
        seed_salt: None,
    };
    let max_reasks = config.max_reasks;
    let router = Router::from_backends(&backends).with_config(config);
    let max_turns = args.max_turns.unwrap_or(DEFAULT_MAX_TURNS);
    let history = match &args.history {
        Some(p) => read_history(p, max_turns)?,
        None => ConversationHistory::new(max_turns),
    };
    match router.route_with(&instruction, &history, max_reasks, args.image_seed).await {
        Ok(result) => {
            if let (Some(dir), Some(artifact)) = (&args.artifact_out, &result.artifact) {
                let stored = ArtifactStore::open(dir)
                    .and_then(|s| s.put(artifact))
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
                tracing::info!(path = %stored.path.display(), "artifact written");
            }
            emit(&result)
        }
        Err(e) => {
            emit(&serde_json::json!({"error": e.kind.to_string(), "kind": e.kind, "trace": e.trace}))?;
            Err(CliError::Runtime(e.to_string()))
        }
    }
}

fn parse_ratios(raw: &str) -> Result<MixRatios, CliError> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--ratios {raw:?}: {e}")))?;
    let [t, i, s] = parts[..] else {
        return Err(CliError::Usage(format!("--ratios {raw:?}: expected three values")));
    };
    let sum = t + i + s;
    if !(sum.is_finite() && sum > 0.0) || parts.iter().any(|p| *p < 0.0) {
        return Err(CliError::Usage(format!("--ratios {raw:?}: weights must be non-negative with a positive sum")));
    }
    let r = MixRatios {
        text: t / sum,
        image: i / sum,
        speech: s / sum,
    };
    r.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(r)
}

fn load_records(path: &Path) -> Result<Vec<modalgate_core::model::InstructionRecord>, CliError> {
    read_corpus(path, RecordSource::Human).map_err(CliError::runtime)
}

pub async fn datagen(args: DatagenArgs) -> Result<(), CliError> {
    let out = required(args.out.clone(), "out")?;
    let wire = args.wire.unwrap_or_default();
    let rng_seed = args.rng_seed.unwrap_or(0);
    if args.mix {
        let target = required(args.target, "target")?;
        let ratios = match &args.ratios {
            Some(r) => parse_ratios(r)?,
            None => MixRatios::thirds(),
        };
        let load = |p: &Option<PathBuf>, flag: &str| -> Result<Vec<_>, CliError> {
            match p {
                Some(p) => load_records(p),
                None => Err(CliError::Usage(format!("--mix needs --{flag}"))),
            }
        };
        let text = load(&args.text_corpus, "text-corpus")?;
        let image = load(&args.image_corpus, "image-corpus")?;
        let speech = load(&args.speech_corpus, "speech-corpus")?;
        let mut upstream = Vec::new();
        for p in &args.upstream {
            let m: DatasetManifest = serde_json::from_str(&read_lines(p)?)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            upstream.push(m);
        }
        let output = mix_corpora(
            [&text, &image, &speech],
            target,
            &ratios,
            args.val_fraction.unwrap_or(0.05),
            rng_seed,
            &upstream,
            TrainingEcho::default(),
        )
        .map_err(CliError::runtime)?;
        output.write_to(&out, wire).map_err(CliError::runtime)?;
        return emit(&output.manifest);
    }

    let modality = required(args.modality, "modality")?;
    if modality == Modality::Text {
        return Err(CliError::Usage(
            "the text route is imported, not generated; use --mix with --text-corpus".into(),
        ));
    }
    let captions = required(args.captions, "captions")?;
    let seeds = required(args.seeds, "seeds")?;
    let pool = CaptionPool::from_file(modality, &captions).map_err(CliError::runtime)?;
    let seeds = SeedStore::from_file(&seeds).map_err(CliError::runtime)?;
    let teacher_spec = args.teacher.unwrap_or_else(|| "mock:teacher".into());
    let teacher = BackendSet::resolve(&teacher_spec, None, None, None, &[], None)
        .map_err(|e| CliError::Usage(e.to_string()))?
        .llm;
    let filter = match &args.filters {
        Some(p) => FilterConfig::from_file(p).map_err(CliError::runtime)?,
        None => FilterConfig::default(),
    };
    let defaults = GenConfig::default();
    let gen = GenConfig {
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        max_batches: args.max_batches.or(defaults.max_batches),
        concurrency: args.concurrency.unwrap_or(defaults.concurrency),
        min_interval: args.min_interval_ms.map_or(defaults.min_interval, Duration::from_millis),
        ..defaults
    };
    let job = GenerateJob {
        pool,
        seeds,
        teacher,
        gen,
        filter,
        target: args.target,
        rng_seed,
        training: TrainingEcho::default(),
    };
    let output = generate_corpus(job).await.map_err(CliError::runtime)?;
    output.write_to(&out, wire).map_err(CliError::runtime)?;
    emit(&output.manifest)
}

pub async fn eval(args: EvalArgs) -> Result<(), CliError> {
    let corpus = required(args.corpus, "corpus")?;
    let llm = required(args.llm, "llm")?;
    let out = required(args.out, "out")?;
    let mut spec = EvalSpec::new(corpus, llm);
    spec.name = args.name;
    spec.policy = args.policy.unwrap_or_default();
    spec.image = args.image;
    spec.speech = args.speech;
    spec.scorer = args.scorer;
    spec.references = args.references;
    spec.out_dir = Some(out.clone());
    spec.cache_dir = args.cache_dir;
    spec.resume = args.resume;
    spec.parallelism = args.parallelism.unwrap_or(spec.parallelism);
    spec.include_text_ground = args.include_text_ground;
    spec.penalize_mismatch = args.penalize_mismatch;
    spec.temperature = args.temperature;
    spec.max_new_tokens = args.max_new_tokens;
    spec.max_reasks = args.max_reasks;
    spec.rng_seed = args.rng_seed.unwrap_or(0);
    let job = spec.into_job().map_err(CliError::runtime)?;
    tokio::select! {
        result = run_eval(&job) => {
            let output = result.map_err(CliError::runtime)?;
            tracing::info!(cached = output.cached, out = %out.display(), "evaluation finished");
            emit(&output.report)
        }
        _ = tokio::signal::ctrl_c() => {
            // every finished item is already on disk; the in-flight ones are dropped
            Err(CliError::Runtime("interrupted; rerun with --resume to continue from the cache".into()))
        }
    }
}

pub fn stats(args: StatsArgs) -> Result<(), CliError> {
    let corpus = required(args.corpus, "corpus")?;
    let records = load_records(&corpus)?;
    let verbs = match &args.verbs {
        Some(p) => Lexicon::from_lines(&read_lines(p)?),
        None => Lexicon::default_verbs(),
    };
    let nouns = match &args.nouns {
        Some(p) => Lexicon::from_lines(&read_lines(p)?),
        None => Lexicon::default_nouns(),
    };
    let mut table = verb_noun_stats_with(&records, &verbs, &nouns);
    if let Some(n) = args.top {
        table.rows.truncate(n);
    }
    emit(&table)
}

pub fn compare(args: CompareArgs) -> Result<(), CliError> {
    if args.reports.len() < 2 {
        return Err(CliError::Usage("compare needs at least two reports".into()));
    }
    let mut reports = Vec::new();
    for p in &args.reports {
        let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
        reports.push(read_report(&path).map_err(CliError::runtime)?);
    }
    let table = compare_systems(&reports).map_err(CliError::runtime)?;
    if args.markdown {
        print!("{}", table.to_markdown());
        Ok(())
    } else {
        emit(&table)
    }
}
