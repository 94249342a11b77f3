use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use finegrain::corpus::{self, Label};
use finegrain::server::{router, AppState, TaskStore};

const TASKS: &str = concat!(
    r#"{"id":"t1","image_ref":"img/1.jpg","prompt":"Describe.","responses":["Un café crème ☕. It is hot.","A dog."]}"#,
    "\n",
    r#"{"id":"t2","image_ref":"img/2.jpg","prompt":"Describe.","responses":["A red bus.","Two cats sleep."]}"#,
    "\n"
);

fn setup(dir: &Path) -> (Router, PathBuf) {
    let tasks = dir.join("tasks.jsonl");
    let out = dir.join("done.jsonl");
    std::fs::write(&tasks, TASKS).unwrap();
    let store = TaskStore::load(&tasks, &out, 2).unwrap();
    (router(AppState::new(store, out.clone()), None), out)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn annotate_export_and_reingest() {
    let dir = tempfile::tempdir().unwrap();
    let (app, out) = setup(dir.path());

    let (status, body) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.is_empty());

    let (status, body) = call(&app, "GET", "/api/tasks?status=pending", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body).as_array().unwrap().len(), 2);

    // "Un café crème ☕." is 16 scalar values; the byte length is larger.
    let spans = json!({"spans": [
        [{"start": 0, "end": 16, "label": "accurate"}, {"start": 17, "end": 27, "label": "analysis"}],
        [{"start": 2, "end": 5, "label": "inaccurate"}]
    ]});
    let (status, body) = call(
        &app,
        "POST",
        "/api/tasks/t1/annotations",
        Some(spans.clone()),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(json_of(&body)["status"], "done");
    assert!(out.exists());

    let (_, body) = call(&app, "GET", "/api/tasks?status=done", None).await;
    assert_eq!(json_of(&body)[0]["id"], "t1");

    let (status, body) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let records = corpus::ingest_str(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].id, "t1-0");
    assert_eq!(records[0].spans[0].end, 16);
    assert_eq!(records[0].spans[1].label, Label::Analysis);
    let cafe: String = records[0].response.chars().take(16).collect();
    assert_eq!(cafe, "Un café crème ☕.");
    assert_eq!(records[1].spans[0].label, Label::Inaccurate);

    // Resubmission conflicts unless overwrite is requested.
    let (status, _) = call(
        &app,
        "POST",
        "/api/tasks/t1/annotations",
        Some(spans.clone()),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(
        &app,
        "POST",
        "/api/tasks/t1/annotations?overwrite=true",
        Some(spans),
    )
    .await;
    assert_eq!(status, StatusCode::OK);

    // A restarted server picks the completed task back up.
    let (again, _) = setup(dir.path());
    let (_, body) = call(&again, "GET", "/api/tasks/t1", None).await;
    assert_eq!(json_of(&body)["status"], "done");
}

#[tokio::test]
async fn invalid_submissions() {
    let dir = tempfile::tempdir().unwrap();
    let (app, out) = setup(dir.path());

    let overlap = json!({"spans": [
        [],
        [{"start": 0, "end": 4, "label": "accurate"}, {"start": 2, "end": 6, "label": "inaccurate"}]
    ]});
    let (status, body) = call(&app, "POST", "/api/tasks/t2/annotations", Some(overlap)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v = json_of(&body);
    assert_eq!(v["error"], "invalid spans");
    let violations = v["violations"].as_array().unwrap();
    assert_eq!(violations.len(), 1);
    assert_eq!(violations[0]["response"], 1);
    assert!(violations[0]["message"]
        .as_str()
        .unwrap()
        .contains("overlap"));
    assert!(!out.exists());

    let bad_label = json!({"spans": [[{"start": 0, "end": 1, "label": "wrong"}], []]});
    let (status, _) = call(&app, "POST", "/api/tasks/t2/annotations", Some(bad_label)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let wrong_count = json!({"spans": [[]]});
    let (status, _) = call(&app, "POST", "/api/tasks/t2/annotations", Some(wrong_count)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(
        &app,
        "POST",
        "/api/tasks/nope/annotations",
        Some(json!({"spans": [[], []]})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/tasks/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8_lossy(&body).contains("/api"));
}
