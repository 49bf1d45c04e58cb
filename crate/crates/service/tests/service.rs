use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use modalgate_core::backends::{BackendError, BackendKind, BackendSet, MockChat, SecretToken};
use modalgate_core::clock::FixedClock;
use modalgate_core::digest::sha256_hex;
use modalgate_core::eval::{run_eval, EvalJob, EvalSpec};
use modalgate_core::model::{InstructionRecord, Modality, RecordSource, StructuredResponse};
use modalgate_service::{app, AppState, JobStatus, RequestLog, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const WAVE: &str = "Can you show me the famous Japanese painting with a huge wave and Mount Fuji in the background?";

fn rec(instruction: &str, modality: Modality, response: &str) -> InstructionRecord {
    InstructionRecord::new(
        instruction,
        StructuredResponse::new(modality, response).unwrap(),
        RecordSource::Human,
    )
    .unwrap()
}

fn oracle_records() -> Vec<InstructionRecord> {
    vec![
        rec(WAVE, Modality::Image, "The Great Wave off Kanagawa."),
        rec("Where is the Statue of Liberty?", Modality::Text, "It stands on Liberty Island in New York Harbor."),
        rec("show it to me as a picture", Modality::Image, "The Statue of Liberty on Liberty Island."),
        rec("How do you pronounce this name: John?", Modality::Speech, "John"),
    ]
}

struct Harness {
    _dir: tempfile::TempDir,
    root: PathBuf,
    state: Arc<AppState>,
    app: axum::Router,
}

fn harness_with(llm: MockChat, tweak: impl FnOnce(&mut ServiceConfig), token: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut config = ServiceConfig::default().with_data_root(&root);
    tweak(&mut config);
    let backends = BackendSet::mocks(Arc::new(llm));
    let state = AppState::with_backends(config, backends)
        .unwrap()
        .with_clock(Arc::new(FixedClock { unix_millis: 1_000 }))
        .with_token(token.map(SecretToken::new))
        .with_request_log(RequestLog::to_writer(std::io::sink()));
    let state = Arc::new(state);
    Harness {
        _dir: dir,
        root,
        app: app(state.clone()),
        state,
    }
}

fn harness() -> Harness {
    harness_with(MockChat::oracle(&oracle_records()), |_| {}, None)
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, HeaderMap, Bytes) {
    call_with(app, method, uri, body, None).await
}

async fn call_with(
    app: &axum::Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, HeaderMap, Bytes) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(v) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    (status, headers, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
}

async fn call_json(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(app: &axum::Router) -> String {
    let (status, body) = call_json(app, Method::POST, "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["id"].as_str().unwrap().to_string()
}

fn dir_len(p: &Path) -> usize {
    std::fs::read_dir(p).map(|d| d.count()).unwrap_or(0)
}

#[tokio::test]
async fn respond_artifact_session_round_trip() {
    let h = harness();
    let sid = new_session(&h.app).await;
    let (status, body) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"session_id": sid, "instruction": WAVE})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["modality"], "image");
    assert_eq!(body["trace"]["conversion_prompt"], "The Great Wave off Kanagawa.");
    let url = body["artifact_url"].as_str().unwrap();
    let id = url.rsplit('/').next().unwrap();

    let (status, headers, bytes) = call(&h.app, Method::GET, url, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(sha256_hex(&bytes), id);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    assert!(bytes.starts_with(b"\x89PNG"));

    let (status, transcript) = call_json(&h.app, Method::GET, &format!("/v1/sessions/{sid}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let turns = transcript["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 2);
    assert_eq!(turns[0]["role"], "user");
    assert_eq!(turns[0]["text"], WAVE);
    assert_eq!(turns[1]["role"], "assistant");
    assert_eq!(turns[1]["modality"], "image");
    assert_eq!(turns[1]["artifact_url"], url);
}

#[tokio::test]
async fn conversion_prompt_matches_backend_input() {
    let h = harness();
    for instruction in [WAVE, "How do you pronounce this name: John?"] {
        let (_, body) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instruction": instruction}))).await;
        let sent = body["trace"]["conversion_prompt"].as_str().unwrap().to_string();
        let kind = if body["modality"] == "image" {
            BackendKind::Image
        } else {
            BackendKind::Speech
        };
        let logged: Vec<String> = h
            .state
            .call_log()
            .entries()
            .into_iter()
            .filter(|r| r.backend == kind)
            .map(|r| r.input)
            .collect();
        assert_eq!(logged, vec![sent]);
    }
}

#[tokio::test]
async fn session_history_reaches_the_llm() {
    let h = harness();
    let sid = new_session(&h.app).await;
    let (_, first) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"session_id": sid, "instruction": "Where is the Statue of Liberty?"})),
    )
    .await;
    assert_eq!(first["modality"], "text");
    let (_, second) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"session_id": sid, "instruction": "show it to me as a picture"})),
    )
    .await;
    assert_eq!(second["modality"], "image");
    let prompt = second["trace"]["llm_prompt"].as_str().unwrap();
    assert!(prompt.contains("User: Where is the Statue of Liberty?"), "{prompt}");
    assert!(prompt.contains("Assistant: It stands on Liberty Island in New York Harbor."));
    let (_, transcript) = call_json(&h.app, Method::GET, &format!("/v1/sessions/{sid}"), None).await;
    let texts: Vec<&str> = transcript["turns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["text"].as_str().unwrap())
        .collect();
    assert_eq!(
        texts,
        [
            "Where is the Statue of Liberty?",
            "It stands on Liberty Island in New York Harbor.",
            "show it to me as a picture",
            "The Statue of Liberty on Liberty Island."
        ]
    );
}

#[tokio::test]
async fn history_is_bounded_by_max_turns() {
    let h = harness_with(MockChat::oracle(&oracle_records()), |c| c.max_turns = 1, None);
    let sid = new_session(&h.app).await;
    let body = json!({"session_id": sid, "instruction": "Where is the Statue of Liberty?"});
    call_json(&h.app, Method::POST, "/v1/respond", Some(body)).await;
    let (_, second) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"session_id": sid, "instruction": "show it to me as a picture"})),
    )
    .await;
    let prompt = second["trace"]["llm_prompt"].as_str().unwrap();
    assert!(!prompt.contains("User: Where is"));
    assert!(prompt.contains("Assistant: It stands"));
}

#[tokio::test]
async fn stateless_respond_writes_no_session() {
    let h = harness();
    let sessions = h.root.join("sessions");
    let before = dir_len(&sessions);
    let (status, body) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instruction": "1+1=?"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["modality"], "text");
    assert_eq!(body["trace"]["llm_prompt"], "1+1=?");
    assert_eq!(dir_len(&sessions), before);
}

#[tokio::test]
async fn request_errors() {
    let h = harness();
    let (status, _) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instruction": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"instruction": "hi", "session_id": "nope"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instr": "hi"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call_json(&h.app, Method::GET, "/v1/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&h.app, Method::GET, &format!("/v1/artifacts/{}", "a".repeat(64)), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&h.app, Method::GET, "/v1/artifacts/..%2F..%2Fetc", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&h.app, Method::GET, "/v1/eval/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn backend_failure_is_502_with_trace() {
    let h = harness_with(MockChat::failing(BackendError::Transport("connection refused".into())), |_| {}, None);
    let sid = new_session(&h.app).await;
    let (status, body) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"session_id": sid, "instruction": "draw a cat"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["trace"]["instruction"], "draw a cat");
    assert_eq!(body["trace"]["llm_prompt"], "draw a cat");
    assert!(body["error"].as_str().unwrap().contains("connection refused"));
    let (_, transcript) = call_json(&h.app, Method::GET, &format!("/v1/sessions/{sid}"), None).await;
    assert!(transcript["turns"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn slow_backend_times_out() {
    let slow = MockChat::oracle(&oracle_records()).with_delay(Duration::from_millis(1500));
    let h = harness_with(slow, |c| c.respond_timeout_secs = 1, None);
    let (status, body) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instruction": WAVE}))).await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT, "{body}");
}

#[tokio::test]
async fn artifacts_are_content_addressed_across_restarts() {
    let h = harness();
    let (_, a) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instruction": WAVE}))).await;
    let (_, b) = call_json(&h.app, Method::POST, "/v1/respond", Some(json!({"instruction": WAVE}))).await;
    assert_eq!(a["artifact_url"], b["artifact_url"]);
    assert_eq!(dir_len(&h.root.join("artifacts")), 1);

    let config = h.state.config().clone();
    let restarted = AppState::with_backends(config, BackendSet::mocks(Arc::new(MockChat::oracle(&[]))))
        .unwrap()
        .with_request_log(RequestLog::to_writer(std::io::sink()));
    let app2 = app(Arc::new(restarted));
    let (status, _, bytes) = call(&app2, Method::GET, a["artifact_url"].as_str().unwrap(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(a["artifact_url"].as_str().unwrap().ends_with(&sha256_hex(&bytes)));
}

#[tokio::test]
async fn speech_artifacts_are_wav() {
    let h = harness();
    let (_, body) = call_json(
        &h.app,
        Method::POST,
        "/v1/respond",
        Some(json!({"instruction": "How do you pronounce this name: John?"})),
    )
    .await;
    assert_eq!(body["modality"], "speech");
    let (_, headers, bytes) = call(&h.app, Method::GET, body["artifact_url"].as_str().unwrap(), None).await;
    assert_eq!(headers[header::CONTENT_TYPE], "audio/wav");
    assert!(bytes.starts_with(b"RIFF"));
}

#[tokio::test]
async fn concurrent_turns_stay_paired() {
    let h = harness();
    let sid = new_session(&h.app).await;
    let calls = (0..8).map(|_| {
        let app = h.app.clone();
        let sid = sid.clone();
        async move {
            call_json(
                &app,
                Method::POST,
                "/v1/respond",
                Some(json!({"session_id": sid, "instruction": "Where is the Statue of Liberty?"})),
            )
            .await
        }
    });
    for (status, _) in futures_join(calls).await {
        assert_eq!(status, StatusCode::OK);
    }
    let (_, transcript) = call_json(&h.app, Method::GET, &format!("/v1/sessions/{sid}"), None).await;
    let roles: Vec<&str> = transcript["turns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles.len(), 16);
    assert!(roles.chunks(2).all(|c| c == ["user", "assistant"]));
}

async fn futures_join<F: std::future::Future + Send + 'static>(futs: impl Iterator<Item = F>) -> Vec<F::Output>
where
    F::Output: Send + 'static,
{
    let handles: Vec<_> = futs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn bearer_token_guards_api_but_not_artifacts() {
    let h = harness_with(MockChat::oracle(&oracle_records()), |_| {}, Some("tok"));
    let body = json!({"instruction": WAVE});
    let (status, _, _) = call(&h.app, Method::POST, "/v1/respond", Some(body.clone())).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, _) = call_with(&h.app, Method::POST, "/v1/respond", Some(body.clone()), Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, bytes) = call_with(&h.app, Method::POST, "/v1/respond", Some(body), Some("tok")).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    let (status, _, _) = call(&h.app, Method::GET, v["artifact_url"].as_str().unwrap(), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _, _) = call(&h.app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn one_log_line_per_request() {
    let dir = tempfile::tempdir().unwrap();
    let (log, buf) = RequestLog::memory();
    let state = AppState::with_backends(
        ServiceConfig::default().with_data_root(dir.path()),
        BackendSet::mocks(Arc::new(MockChat::oracle(&oracle_records()))),
    )
    .unwrap()
    .with_token(Some(SecretToken::new("sekrit")))
    .with_request_log(log);
    let app = app(Arc::new(state));
    call_with(&app, Method::POST, "/v1/respond", Some(json!({"instruction": "1+1=?"})), Some("sekrit")).await;
    call(&app, Method::GET, "/v1/sessions/unknown", None).await;
    let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
    assert!(!text.contains("sekrit"));
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["method"], "POST");
    assert_eq!(lines[0]["path"], "/v1/respond");
    assert_eq!(lines[0]["status"], 200);
    assert_eq!(lines[1]["status"], 401);
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

async fn poll_until_done(app: &axum::Router, job_id: &str) -> Value {
    for _ in 0..500 {
        let (status, body) = call_json(app, Method::GET, &format!("/v1/eval/{job_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["status"] != "running" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job_id} never finished");
}

#[tokio::test]
async fn eval_job_matches_direct_run() {
    let h = harness();
    let corpus = fixture("eval6.jsonl");
    let body = json!({
        "job_id": "job-a",
        "corpus": corpus,
        "llm": "mock:oracle",
        "image": "mock:image",
        "speech": "mock:speech",
    });
    let (status, accepted) = call_json(&h.app, Method::POST, "/v1/eval", Some(body.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(accepted["job_id"], "job-a");
    let (status, _) = call_json(&h.app, Method::POST, "/v1/eval", Some(body.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let done = poll_until_done(&h.app, "job-a").await;
    assert_eq!(done["status"], "done", "{done}");
    assert!(h.root.join("eval/job-a/report.json").is_file());

    let mut spec: EvalSpec = serde_json::from_value(body).unwrap();
    spec.job_id = None;
    let direct = run_eval(&spec.into_job().unwrap()).await.unwrap().report;
    assert_eq!(done["report"], serde_json::to_value(&direct).unwrap());
    assert_eq!(direct.modality_accuracy, Some(1.0));
}

#[tokio::test]
async fn eval_job_reports_running_then_done() {
    let h = harness();
    let corpus = fixture("eval6.jsonl");
    let records: Vec<InstructionRecord> = modalgate_core::eval::load_eval_corpus(&corpus)
        .unwrap()
        .into_iter()
        .map(|i| i.record)
        .collect();
    let slow = MockChat::oracle(&records).with_delay(Duration::from_millis(100));
    let job = EvalJob::new(
        &corpus,
        modalgate_core::eval::SystemDescriptor::new("slow", Default::default(), "mock:oracle"),
        BackendSet::mocks(Arc::new(slow)),
    );
    h.state.jobs().submit("slow-job", job).unwrap();
    let (_, body) = call_json(&h.app, Method::GET, "/v1/eval/slow-job", None).await;
    assert_eq!(body["status"], "running");
    assert!(body.get("report").is_none());
    let done = poll_until_done(&h.app, "slow-job").await;
    assert_eq!(done["status"], "done");
    assert!(matches!(h.state.jobs().get("slow-job").unwrap().status, JobStatus::Done));
}

#[tokio::test]
async fn eval_job_errors() {
    let h = harness();
    let (status, body) = call_json(
        &h.app,
        Method::POST,
        "/v1/eval",
        Some(json!({"corpus": "/no/such.jsonl", "llm": "mock:oracle"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("/no/such.jsonl"));
    let (status, _) = call_json(
        &h.app,
        Method::POST,
        "/v1/eval",
        Some(json!({"corpus": "x", "llm": "mock:text", "job_id": "../evil"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, accepted) = call_json(
        &h.app,
        Method::POST,
        "/v1/eval",
        Some(json!({"corpus": "/no/such.jsonl", "llm": "mock:text"})),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = poll_until_done(&h.app, accepted["job_id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "failed");
    assert!(done["error"].as_str().unwrap().contains("/no/such.jsonl"));
}
