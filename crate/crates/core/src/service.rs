//! HTTP API over the task pipelines, dialog sessions and cross-examination.
//!
//! Pipelines block on remote models, so every request runs on the blocking
//! pool. Dialog turns are serialized per session; a second turn posted while
//! one is in flight gets 409.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::CorpusStore;
use crate::dense::open_dense_dir;
use crate::dialog::{DialogMode, DialogRouter, DialogSession, ResponseSource, RoutingTrace};
use crate::error::{KgiError, Result};
use crate::generator::{ExtractiveGenerator, Generator, RemoteGenerator};
use crate::rerank::{FallbackReranker, LexicalReranker, RankedEvidence, RemoteReranker, Reranker};
use crate::sparse::SparseIndex;
use crate::tasks::{cross_examine, Pipeline, PipelineConfig, TaskInput, TaskKind, TaskResult};

pub const MAX_UTTERANCE_CHARS: usize = 2000;
pub const MAX_SNIPPET_CHARS: usize = 400;
pub const TASK_ENDPOINTS: [&str; 4] = ["slot_filling", "fact_checking", "question_answering", "dialog_oneshot"];
const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteModels {
    #[serde(default)]
    pub reranker: Option<String>,
    /// Score with the lexical reranker when the remote one is unreachable.
    #[serde(default)]
    pub reranker_fallback: bool,
    #[serde(default)]
    pub generator: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl Default for RemoteModels {
    fn default() -> Self {
        RemoteModels {
            reranker: None,
            reranker_fallback: false,
            generator: None,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub sparse_index: Option<PathBuf>,
    #[serde(default)]
    pub dense_index: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub remote: RemoteModels,
    /// Directory for session snapshots; sessions live only in memory when unset.
    #[serde(default)]
    pub session_dir: Option<PathBuf>,
}

impl ServiceConfig {
    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        self.sparse_index.as_mut().map(fix);
        self.dense_index.as_mut().map(fix);
        self.session_dir.as_mut().map(fix);
    }

    /// Opens the stores and indexes and wires the configured models.
    pub fn build_pipeline(&self) -> Result<Pipeline> {
        let timeout = Duration::from_millis(self.remote.timeout_ms);
        let retries = self.remote.retries;
        let corpus = Arc::new(CorpusStore::open(&self.corpus)?);
        let reranker: Arc<dyn Reranker> = match &self.remote.reranker {
            Some(url) if self.remote.reranker_fallback => Arc::new(FallbackReranker {
                primary: RemoteReranker::new(url.clone(), timeout, retries)?,
                fallback: LexicalReranker,
            }),
            Some(url) => Arc::new(RemoteReranker::new(url.clone(), timeout, retries)?),
            None => Arc::new(LexicalReranker),
        };
        let generator: Arc<dyn Generator> = match &self.remote.generator {
            Some(url) => Arc::new(RemoteGenerator::new(url.clone(), timeout, retries)?),
            None => Arc::new(ExtractiveGenerator::default()),
        };
        let mut pipeline = Pipeline::new(corpus, reranker, generator).with_config(self.pipeline);
        if let Some(dir) = &self.sparse_index {
            pipeline = pipeline.with_sparse(Arc::new(SparseIndex::open(dir)?));
        }
        if let Some(dir) = &self.dense_index {
            let (index, spec) = open_dense_dir(dir)?;
            let embedder = spec.build(timeout, retries)?;
            pipeline = pipeline.with_dense(Arc::new(index), Arc::from(embedder))?;
        }
        if !pipeline.has_sparse() && !pipeline.has_dense() {
            return Err(KgiError::Config("configure sparse_index, dense_index or both".into()));
        }
        Ok(pipeline)
    }
}

type SessionSlot = Arc<tokio::sync::Mutex<DialogSession>>;

pub struct AppState {
    pipeline: Pipeline,
    dialog: DialogRouter,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    session_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(pipeline: Pipeline) -> Self {
        let shared = Arc::new(pipeline.clone());
        AppState {
            dialog: DialogRouter::new(shared.clone(), shared),
            pipeline,
            sessions: Mutex::new(HashMap::new()),
            session_dir: None,
        }
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self> {
        let state = AppState::new(config.build_pipeline()?);
        match &config.session_dir {
            Some(dir) => state.with_session_dir(dir),
            None => Ok(state),
        }
    }

    pub fn with_dialog_router(mut self, router: DialogRouter) -> Self {
        self.dialog = router;
        self
    }

    pub fn with_session_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.session_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn session_path(&self, id: &str) -> Option<PathBuf> {
        self.session_dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    fn session(&self, id: &str, mode: DialogMode) -> Result<SessionSlot> {
        let mut sessions = self.sessions.lock().map_err(|_| KgiError::Internal("session table poisoned".into()))?;
        if let Some(slot) = sessions.get(id) {
            return Ok(slot.clone());
        }
        let session = match self.session_path(id).filter(|p| p.exists()) {
            Some(path) => {
                let stored: DialogSession = serde_json::from_slice(&std::fs::read(&path)?)?;
                DialogSession::from_turns(id, stored.mode, stored.turns().to_vec())?
            }
            None => DialogSession::new(id, mode),
        };
        let slot = Arc::new(tokio::sync::Mutex::new(session));
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    fn persist(&self, session: &DialogSession) -> Result<()> {
        let Some(path) = self.session_path(&session.session_id) else {
            return Ok(());
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(session)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/task/{task}", post(handle_task))
        .route("/api/dialog/turn", post(handle_dialog_turn))
        .route("/api/cross_examine", post(handle_cross_examine))
        .route("/api/passage/{pid}", get(handle_passage))
        .route("/api/health", get(handle_health))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputView {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceView {
    pub pid: String,
    pub title: String,
    pub snippet: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub request_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    pub outputs: Vec<OutputView>,
    pub evidence: Vec<EvidenceView>,
    pub closed_book: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<ResponseSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingTrace>,
    pub timing_ms: u64,
}

fn snippet(text: &str) -> String {
    text.chars().take(MAX_SNIPPET_CHARS).collect()
}

fn evidence_view(corpus: &CorpusStore, pid: &str, score: Option<f64>) -> EvidenceView {
    let passage = corpus.get_passage(pid).ok();
    EvidenceView {
        pid: pid.to_string(),
        title: passage.map(|p| p.title.clone()).unwrap_or_default(),
        snippet: passage.map(|p| snippet(&p.text)).unwrap_or_default(),
        score,
    }
}

fn evidence_views(corpus: &CorpusStore, evidence: &[RankedEvidence]) -> Vec<EvidenceView> {
    evidence
        .iter()
        .map(|e| evidence_view(corpus, &e.pid, Some(e.rerank_score)))
        .collect()
}

fn task_response(request_id: String, corpus: &CorpusStore, result: &TaskResult, started: Instant) -> ApiResponse {
    ApiResponse {
        request_id,
        task: Some(result.task),
        query_text: Some(result.query_text.clone()),
        outputs: result
            .outputs
            .iter()
            .map(|o| OutputView {
                text: o.text.clone(),
                score: o.model_score,
            })
            .collect(),
        evidence: evidence_views(corpus, &result.evidence),
        closed_book: result.closed_book,
        session_id: None,
        source: None,
        routing: None,
        timing_ms: started.elapsed().as_millis() as u64,
    }
}

fn request_id(headers: &HeaderMap) -> String {
    headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .map(str::to_string)
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string())
}

fn with_request_id(request_id: &str, status: StatusCode, body: serde_json::Value) -> Response {
    let mut response = (status, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(request_id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

fn ok(response: &ApiResponse) -> Response {
    let body = serde_json::to_value(response).unwrap_or_default();
    with_request_id(&response.request_id, StatusCode::OK, body)
}

fn error_status(err: &KgiError) -> StatusCode {
    match err {
        KgiError::Validation { .. } | KgiError::InvalidArgument(_) | KgiError::Json(_) => StatusCode::BAD_REQUEST,
        KgiError::PassageNotFound(_) => StatusCode::NOT_FOUND,
        e if e.is_transport() => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(request_id: &str, err: &KgiError, corpus: &CorpusStore) -> Response {
    let status = error_status(err);
    if status.is_server_error() {
        tracing::error!(request_id, error = %err, "request failed");
    }
    let mut body = json!({ "request_id": request_id, "error": err.to_string() });
    if let KgiError::Validation { field, .. } = err {
        body["field"] = json!(field);
    }
    // Retrieval succeeded even though the model is down: hand back the evidence.
    if let KgiError::GenerationFailed { evidence, .. } = err {
        body["evidence"] = json!(evidence_views(corpus, evidence));
    }
    with_request_id(request_id, status, body)
}

fn bad_request(request_id: &str, message: impl Into<String>, extra: serde_json::Value) -> Response {
    let mut body = json!({ "request_id": request_id, "error": message.into() });
    if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
        b.extend(e.clone());
    }
    with_request_id(request_id, StatusCode::BAD_REQUEST, body)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(KgiError::Internal(format!("worker failed: {e}"))))
}

#[derive(Debug, Default, Deserialize)]
struct TaskFields {
    head: Option<String>,
    relation: Option<String>,
    claim: Option<String>,
    question: Option<String>,
    turns: Option<Vec<String>>,
}

fn task_input(task: &str, f: TaskFields) -> Option<TaskInput> {
    Some(match task {
        "slot_filling" => TaskInput::SlotFilling {
            head: f.head.unwrap_or_default(),
            relation: f.relation.unwrap_or_default(),
        },
        "fact_checking" => TaskInput::FactChecking {
            claim: f.claim.unwrap_or_default(),
        },
        "question_answering" => TaskInput::QuestionAnswering {
            question: f.question.unwrap_or_default(),
        },
        "dialog_oneshot" => TaskInput::Dialog {
            turns: f.turns.unwrap_or_default(),
        },
        _ => return None,
    })
}

async fn handle_task(
    State(state): State<Arc<AppState>>,
    UrlPath(task): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let started = Instant::now();
    let rid = request_id(&headers);
    if !TASK_ENDPOINTS.contains(&task.as_str()) {
        return bad_request(&rid, format!("unknown task `{task}`"), json!({ "allowed_tasks": TASK_ENDPOINTS }));
    }
    let fields: TaskFields = match serde_json::from_slice(&body) {
        Ok(f) => f,
        Err(e) => return bad_request(&rid, format!("invalid body: {e}"), json!({})),
    };
    let Some(input) = task_input(&task, fields) else {
        return bad_request(&rid, format!("unknown task `{task}`"), json!({ "allowed_tasks": TASK_ENDPOINTS }));
    };
    let pipeline = state.pipeline.clone();
    match blocking(move || pipeline.run_input(&input)).await {
        Ok(result) => ok(&task_response(rid, state.pipeline.corpus(), &result, started)),
        Err(e) => error_response(&rid, &e, state.pipeline.corpus()),
    }
}

#[derive(Debug, Deserialize)]
struct DialogTurnRequest {
    #[serde(default)]
    session_id: Option<String>,
    utterance: String,
    #[serde(default)]
    mode: Option<String>,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn handle_dialog_turn(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let started = Instant::now();
    let rid = request_id(&headers);
    let req: DialogTurnRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(&rid, format!("invalid body: {e}"), json!({})),
    };
    if req.utterance.chars().count() > MAX_UTTERANCE_CHARS {
        return bad_request(
            &rid,
            format!("utterance exceeds {MAX_UTTERANCE_CHARS} characters"),
            json!({ "field": "utterance" }),
        );
    }
    let mode = match req.mode.as_deref() {
        None => DialogMode::default(),
        Some(m) => match DialogMode::parse(m) {
            Some(mode) => mode,
            None => {
                return bad_request(
                    &rid,
                    format!("unknown mode `{m}`"),
                    json!({ "allowed_modes": ["conventional", "hybrid"] }),
                )
            }
        },
    };
    let session_id = req.session_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    if !valid_session_id(&session_id) {
        return bad_request(&rid, "session_id must be 1-128 characters of [A-Za-z0-9_-]", json!({ "field": "session_id" }));
    }
    let slot = match state.session(&session_id, mode) {
        Ok(s) => s,
        Err(e) => return error_response(&rid, &e, state.pipeline.corpus()),
    };
    let Ok(mut guard) = slot.try_lock_owned() else {
        let body = json!({ "request_id": rid, "error": "a turn is already in progress for this session" });
        return with_request_id(&rid, StatusCode::CONFLICT, body);
    };
    let worker = state.clone();
    let utterance = req.utterance;
    let outcome = blocking(move || {
        guard.mode = mode;
        let (response, trace) = worker.dialog.respond_traced(&mut guard, &utterance)?;
        if let Err(e) = worker.persist(&guard) {
            tracing::warn!(session = %guard.session_id, error = %e, "could not persist session");
        }
        Ok((response, trace))
    })
    .await;
    let corpus = state.pipeline.corpus();
    match outcome {
        Ok((response, trace)) => ok(&ApiResponse {
            request_id: rid,
            task: None,
            query_text: None,
            outputs: vec![OutputView {
                text: response.text,
                score: 1.0,
            }],
            evidence: response
                .evidence_pids
                .iter()
                .map(|pid| evidence_view(corpus, pid, None))
                .collect(),
            closed_book: response.evidence_pids.is_empty(),
            session_id: Some(session_id),
            source: Some(response.source),
            routing: Some(trace),
            timing_ms: started.elapsed().as_millis() as u64,
        }),
        Err(e) => error_response(&rid, &e, corpus),
    }
}

#[derive(Debug, Deserialize)]
struct CrossExamineRequest {
    formulations: Vec<TaskInput>,
}

#[derive(Debug, Serialize)]
struct CrossExamineResponse {
    request_id: String,
    answer_agreement: bool,
    evidence_overlap: f64,
    results: BTreeMap<TaskKind, ApiResponse>,
    timing_ms: u64,
}

async fn handle_cross_examine(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let started = Instant::now();
    let rid = request_id(&headers);
    let req: CrossExamineRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(&rid, format!("invalid body: {e}"), json!({})),
    };
    let pipeline = state.pipeline.clone();
    match blocking(move || cross_examine(&pipeline, &req.formulations)).await {
        Ok(report) => {
            let corpus = state.pipeline.corpus();
            let results = report
                .results
                .iter()
                .map(|(task, r)| (*task, task_response(rid.clone(), corpus, r, started)))
                .collect();
            let body = CrossExamineResponse {
                request_id: rid.clone(),
                answer_agreement: report.answer_agreement,
                evidence_overlap: report.evidence_overlap,
                results,
                timing_ms: started.elapsed().as_millis() as u64,
            };
            with_request_id(&rid, StatusCode::OK, serde_json::to_value(body).unwrap_or_default())
        }
        Err(e) => error_response(&rid, &e, state.pipeline.corpus()),
    }
}

async fn handle_passage(State(state): State<Arc<AppState>>, UrlPath(pid): UrlPath<String>, headers: HeaderMap) -> Response {
    let rid = request_id(&headers);
    match state.pipeline.corpus().get_passage(&pid) {
        Ok(p) => {
            let mut body = serde_json::to_value(p).unwrap_or_default();
            body["request_id"] = json!(rid);
            with_request_id(&rid, StatusCode::OK, body)
        }
        Err(e) => error_response(&rid, &e, state.pipeline.corpus()),
    }
}

async fn handle_health(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    let rid = request_id(&headers);
    let sessions = state.sessions.lock().map(|s| s.len()).unwrap_or(0);
    let body = json!({
        "request_id": rid,
        "status": "ok",
        "passages": state.pipeline.corpus().len(),
        "sparse": state.pipeline.has_sparse(),
        "dense": state.pipeline.has_dense(),
        "sessions": sessions,
    });
    with_request_id(&rid, StatusCode::OK, body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snippets_are_bounded() {
        let long = "é".repeat(1000);
        assert_eq!(snippet(&long).chars().count(), MAX_SNIPPET_CHARS);
        assert_eq!(snippet("short"), "short");
    }

    #[test]
    fn session_ids() {
        assert!(valid_session_id("abc-1_2"));
        assert!(!valid_session_id("../etc"));
        assert!(!valid_session_id(""));
    }

    #[test]
    fn config_defaults_and_paths() {
        let mut cfg: ServiceConfig = serde_json::from_str(r#"{"corpus":"c","sparse_index":"/abs/s"}"#).unwrap();
        assert_eq!(cfg.pipeline, PipelineConfig::default());
        assert_eq!(cfg.remote.timeout_ms, 10_000);
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.corpus, PathBuf::from("/base/c"));
        assert_eq!(cfg.sparse_index, Some(PathBuf::from("/abs/s")));
    }

    #[test]
    fn status_mapping() {
        assert_eq!(error_status(&KgiError::validation("x", "y")), StatusCode::BAD_REQUEST);
        let transport = KgiError::Transport {
            endpoint: "http://x".into(),
            attempts: 1,
            retryable: true,
            message: "refused".into(),
        };
        assert_eq!(error_status(&transport), StatusCode::SERVICE_UNAVAILABLE);
        let gen = KgiError::GenerationFailed {
            message: "m".into(),
            evidence: vec![],
            source: Some(Box::new(transport)),
        };
        assert_eq!(error_status(&gen), StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(error_status(&KgiError::Config("c".into())), StatusCode::INTERNAL_SERVER_ERROR);
    }
}
