use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tapes::llm::CallDb;
use tapes::scenario;
use tapes_service::api::router;
use tapes_service::runs::RunManager;
use tapes_service::store::TapeStore;
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    start_id: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(TapeStore::open(dir.path().join("tapes")).unwrap());
    store.save(&scenario::golden_tape()).unwrap();
    let start = scenario::start_tape();
    store.save(&start).unwrap();
    let db = Arc::new(CallDb::open(dir.path().join("calls.sqlite")).unwrap());
    Fixture {
        app: router(Arc::new(RunManager::new(store, db))),
        _dir: dir,
        start_id: start.id().to_string(),
    }
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let request = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(body) => request
            .header("content-type", "application/json")
            .body(Body::from(body.to_string())),
        None => request.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    assert_eq!(response.headers()["access-control-allow-origin"], "*");
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn json_of(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = send(app, method, uri, body).await;
    (status, serde_json::from_str(&text).unwrap_or_else(|e| panic!("{e}: {text}")))
}

#[tokio::test]
async fn tapes_are_listed_and_fetched() {
    let f = fixture();
    let (status, list) = json_of(&f.app, "GET", "/api/tapes", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(list[0]["id"], "golden-delegation");

    let (status, tape) = json_of(&f.app, "GET", "/api/tapes/golden-delegation", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(tape["steps"].as_array().unwrap().len(), 20);
    assert_eq!(tape["steps"][9]["kind"], "call");

    let (status, error) = json_of(&f.app, "GET", "/api/tapes/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(error["error"].as_str().unwrap().contains("missing"));
}

#[tokio::test]
async fn forking_creates_a_linked_revision() {
    let f = fixture();
    let body = json!({"index": 0, "replacement": {"kind": "user_message", "content": "Tell me about Acme"}});
    let (status, child) = json_of(&f.app, "POST", "/api/tapes/golden-delegation/fork", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(child["metadata"]["parent_id"], "golden-delegation");
    assert_eq!(child["metadata"]["author"], "studio");
    assert_eq!(child["steps"][0]["content"], "Tell me about Acme");

    let bad = json!({"index": 0, "replacement": {"kind": "user_message"}});
    let (status, _) = json_of(&f.app, "POST", "/api/tapes/golden-delegation/fork", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let past_end = json!({"index": 99, "replacement": {"kind": "user_message", "content": "x"}});
    let (status, _) = json_of(&f.app, "POST", "/api/tapes/golden-delegation/fork", Some(past_end)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let id = child["metadata"]["id"].as_str().unwrap();
    let (status, report) = json_of(&f.app, "GET", &format!("/api/diff?a=golden-delegation&b={id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let text = report.to_string();
    assert!(text.contains("only_in_a"), "{text}");
}

#[tokio::test(flavor = "multi_thread")]
async fn runs_stream_until_finished() {
    let f = fixture();
    let body = json!({
        "agent_config": scenario::analyst_config(),
        "tape_id": f.start_id,
        "env_config": scenario::env_config(),
    });
    let (status, started) = json_of(&f.app, "POST", "/api/runs", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    let run_id = started["run_id"].as_str().unwrap().to_string();

    let (status, events) = send(&f.app, "GET", &format!("/api/runs/{run_id}/events"), None).await;
    assert_eq!(status, StatusCode::OK);
    let docs: Vec<Value> = events
        .lines()
        .filter_map(|l| l.strip_prefix("data: "))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect();
    assert_eq!(docs.first().unwrap()["type"], "snapshot");
    let last = docs.last().unwrap();
    assert_eq!(last["type"], "finished");
    assert_eq!(last["payload"]["status"], "finished");
    assert_eq!(last["payload"]["reason"], "stop");
    assert!(events.contains("event: finished"));

    let (_, run) = json_of(&f.app, "GET", &format!("/api/runs/{run_id}"), None).await;
    assert_eq!(run["status"], "finished");
    let tape_id = run["tape_id"].as_str().unwrap();
    let (status, tape) = json_of(&f.app, "GET", &format!("/api/tapes/{tape_id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let steps = tape["steps"].as_array().unwrap();
    let prompt_id = steps[1]["metadata"]["prompt_id"].as_str().unwrap();

    let (status, call) = json_of(&f.app, "GET", &format!("/api/llm_calls/{prompt_id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(call["prompt_id"], prompt_id);
    let (status, _) = json_of(&f.app, "GET", "/api/llm_calls/unknown", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, runs) = json_of(&f.app, "GET", "/api/runs", None).await;
    assert_eq!(runs.as_array().unwrap().len(), 1);
    let (status, _) = json_of(&f.app, "GET", "/api/runs/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_run_requests_are_rejected() {
    let f = fixture();
    let body = json!({"agent_config": scenario::analyst_config(), "tape_id": "missing"});
    let (status, _) = json_of(&f.app, "POST", "/api/runs", Some(body)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&f.app, "POST", "/api/runs", Some(json!({"tape_id": "x"}))).await;
    assert!(status.is_client_error());
}
