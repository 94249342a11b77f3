//! HTTP backend for the annotation workbench.
//!
//! Tasks are read from a JSONL file; completed tasks are persisted to an
//! output JSONL file that is rewritten atomically (temp file + rename) on
//! every accepted submission. Reads go through an immutable snapshot; all
//! writes are serialized behind one async mutex.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use crate::corpus::{self, AnnotatedResponse, Label, SpanAnnotation, Split, Violation};
use crate::error::{Error, Result};

pub const DEFAULT_RESPONSES_PER_TASK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Done,
}

fn default_split() -> Split {
    Split::Train
}

fn default_status() -> TaskStatus {
    TaskStatus::Pending
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub image_ref: String,
    pub prompt: String,
    pub responses: Vec<String>,
    #[serde(default = "default_status")]
    pub status: TaskStatus,
    #[serde(default = "default_split")]
    pub split: Split,
    /// One span list per response; empty until submitted.
    #[serde(default)]
    pub annotations: Vec<Vec<SpanAnnotation>>,
}

impl TaskRecord {
    /// Corpus records for a completed task, one per response.
    pub fn records(&self) -> Vec<AnnotatedResponse> {
        self.responses
            .iter()
            .enumerate()
            .map(|(i, response)| AnnotatedResponse {
                id: format!("{}-{i}", self.id),
                image_ref: self.image_ref.clone(),
                prompt: self.prompt.clone(),
                response: response.clone(),
                spans: self.annotations.get(i).cloned().unwrap_or_default(),
                split: self.split,
            })
            .collect()
    }
}

fn parse_tasks(text: &str) -> Result<Vec<TaskRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                line: i + 1,
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TaskStore {
    tasks: Vec<TaskRecord>,
    index: HashMap<String, usize>,
}

impl TaskStore {
    pub fn new(tasks: Vec<TaskRecord>, responses_per_task: usize) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.responses.len() != responses_per_task {
                return Err(Error::InvalidArgument(format!(
                    "task {:?} has {} responses, expected {responses_per_task}",
                    t.id,
                    t.responses.len()
                )));
            }
            if index.insert(t.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate task id {:?}",
                    t.id
                )));
            }
            if t.status == TaskStatus::Done {
                for rec in t.records() {
                    let report = corpus::validate(&rec);
                    if !report.is_valid() {
                        return Err(Error::Invalid {
                            line: i + 1,
                            id: rec.id,
                            report,
                        });
                    }
                }
            }
        }
        Ok(Self { tasks, index })
    }

    /// Tasks from `tasks_path`, with completed entries from `out_path`
    /// (when it exists) taking precedence.
    pub fn load(tasks_path: &Path, out_path: &Path, responses_per_task: usize) -> Result<Self> {
        let mut tasks = parse_tasks(&fs::read_to_string(tasks_path)?)?;
        if out_path.exists() {
            let done = parse_tasks(&fs::read_to_string(out_path)?)?;
            let pos: HashMap<String, usize> = tasks
                .iter()
                .enumerate()
                .map(|(i, t)| (t.id.clone(), i))
                .collect();
            for t in done {
                match pos.get(&t.id) {
                    Some(&i) => tasks[i] = t,
                    None => tasks.push(t),
                }
            }
        }
        Self::new(tasks, responses_per_task)
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn get(&self, id: &str) -> Option<&TaskRecord> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    /// Canonical corpus JSONL of every completed task.
    pub fn export(&self) -> Vec<u8> {
        let records: Vec<AnnotatedResponse> = self
            .tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Done)
            .flat_map(TaskRecord::records)
            .collect();
        corpus::export(&records)
    }

    fn done_jsonl(&self) -> String {
        let mut out = String::new();
        for t in self.tasks.iter().filter(|t| t.status == TaskStatus::Done) {
            out.push_str(&serde_json::to_string(t).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Write via a sibling temp file and rename so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub struct AppState {
    snapshot: RwLock<Arc<TaskStore>>,
    writer: Mutex<()>,
    out_path: PathBuf,
}

impl AppState {
    pub fn new(store: TaskStore, out_path: PathBuf) -> Arc<Self> {
        Arc::new(Self {
            snapshot: RwLock::new(Arc::new(store)),
            writer: Mutex::new(()),
            out_path,
        })
    }

    pub fn snapshot(&self) -> Arc<TaskStore> {
        self.snapshot
            .read()
            .expect("snapshot lock poisoned")
            .clone()
    }
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<TaskStatus>,
}

#[derive(Debug, Deserialize)]
struct SubmitQuery {
    #[serde(default)]
    overwrite: bool,
}

#[derive(Debug, Deserialize)]
struct RawSpan {
    start: usize,
    end: usize,
    label: String,
}

#[derive(Debug, Deserialize)]
pub struct Submission {
    spans: Vec<Vec<RawSpan>>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn list_tasks(State(state): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Response {
    let snap = state.snapshot();
    let tasks: Vec<&TaskRecord> = snap
        .tasks()
        .iter()
        .filter(|t| q.status.is_none_or(|s| t.status == s))
        .collect();
    Json(tasks).into_response()
}

async fn get_task(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.snapshot().get(&id) {
        Some(t) => Json(t).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown task {id:?}")),
    }
}

/// Check a submission against the task; returns typed spans or the list of
/// violations keyed by response index.
fn check_submission(
    task: &TaskRecord,
    sub: &Submission,
) -> std::result::Result<Vec<Vec<SpanAnnotation>>, Vec<(usize, String)>> {
    if sub.spans.len() != task.responses.len() {
        return Err(vec![(
            0,
            format!(
                "expected span lists for {} responses, got {}",
                task.responses.len(),
                sub.spans.len()
            ),
        )]);
    }
    let mut problems = Vec::new();
    let mut typed = Vec::with_capacity(sub.spans.len());
    for (r, (raw, text)) in sub.spans.iter().zip(&task.responses).enumerate() {
        let mut spans = Vec::with_capacity(raw.len());
        for (i, s) in raw.iter().enumerate() {
            match Label::parse(&s.label) {
                Some(label) => spans.push(SpanAnnotation::new(s.start, s.end, label)),
                None => problems.push((
                    r,
                    Violation::UnknownLabel {
                        index: i,
                        label: s.label.clone(),
                    }
                    .to_string(),
                )),
            }
        }
        let rec = AnnotatedResponse {
            id: task.id.clone(),
            image_ref: task.image_ref.clone(),
            prompt: task.prompt.clone(),
            response: text.clone(),
            spans: raw
                .iter()
                .map(|s| SpanAnnotation::new(s.start, s.end, Label::Accurate))
                .collect(),
            split: task.split,
        };
        for v in corpus::validate(&rec).violations {
            problems.push((r, v.to_string()));
        }
        typed.push(spans);
    }
    if problems.is_empty() {
        Ok(typed)
    } else {
        Err(problems)
    }
}

async fn submit(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SubmitQuery>,
    body: std::result::Result<Json<Submission>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(sub) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let _guard = state.writer.lock().await;
    let snap = state.snapshot();
    let Some(task) = snap.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown task {id:?}"));
    };
    if task.status == TaskStatus::Done && !q.overwrite {
        return error(
            StatusCode::CONFLICT,
            format!("task {id:?} is already done; resubmit with ?overwrite=true"),
        );
    }
    let spans = match check_submission(task, &sub) {
        Ok(s) => s,
        Err(problems) => {
            let violations: Vec<_> = problems
                .into_iter()
                .map(|(response, message)| json!({ "response": response, "message": message }))
                .collect();
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": "invalid spans", "violations": violations })),
            )
                .into_response();
        }
    };
    let mut next = (*snap).clone();
    let i = next.index[&id];
    next.tasks[i].annotations = spans;
    next.tasks[i].status = TaskStatus::Done;
    if let Err(e) = write_atomic(&state.out_path, next.done_jsonl().as_bytes()) {
        return error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("persist failed: {e}"),
        );
    }
    let updated = next.tasks[i].clone();
    *state.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
    Json(updated).into_response()
}

async fn export(State(state): State<Arc<AppState>>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        state.snapshot().export(),
    )
        .into_response()
}

const PLACEHOLDER: &str = "<!doctype html><title>annotation workbench</title>\
<p>Workbench assets are not bundled with this server. Start it with \
<code>--static-dir</code> pointing at a built UI, or use the JSON API under \
<code>/api</code>.</p>";

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks", get(list_tasks))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/annotations", axum::routing::post(submit))
        .route("/api/export", get(export))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub tasks: PathBuf,
    pub out: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub responses_per_task: usize,
}

pub async fn serve(cfg: ServeConfig) -> Result<()> {
    let store = TaskStore::load(&cfg.tasks, &cfg.out, cfg.responses_per_task)?;
    let state = AppState::new(store, cfg.out.clone());
    let app = router(state, cfg.static_dir.clone());
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    log::info!("serving annotation API on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
