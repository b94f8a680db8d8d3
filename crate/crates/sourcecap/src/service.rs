//! HTTP API: source upload, comparison jobs, reports and per-query traces.
//!
//! | Method | Path | Body / reply |
//! |---|---|---|
//! | GET  | `/health` | `{"status":"ok"}` |
//! | GET  | `/defaults` | default pipeline configuration |
//! | GET  | `/sources` | registered source profiles |
//! | POST | `/sources` | multipart `file`, `name`, `profile`, `format?` → profile |
//! | GET  | `/presets` | presets from the manifest |
//! | GET  | `/runs` | all job handles |
//! | POST | `/runs` | evaluation config → 202 job handle |
//! | GET  | `/runs/{id}` | job handle, plus report and timings when done |
//! | GET  | `/runs/{id}/report` | the stored `report.json`, byte for byte |
//! | GET  | `/runs/{id}/trace/{query_id}?arm=` | one run record with its wall time |
//!
//! Each job owns `<data_dir>/runs/<id>/` holding `config.json`, `status.json`
//! and, once done, the comparison outputs. Uploaded corpora are kept under
//! `<data_dir>/sources/` and re-indexed on start-up, so completed runs and
//! custom sources survive a restart.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::{Context, Result};
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sourcecap_core::eval::{EvalQuery, RunRecord};
use sourcecap_core::selection::FieldError;
use sourcecap_core::{Llm, PipelineConfig, SourceProfile, SourceRegistry};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use crate::compare::{
    read_report, run_comparison, write_run, ComparisonReport, EvalConfig, Observer, ResolvedEval, RunOptions, Timings,
};
use crate::fanout::Threaded;
use crate::ingest::{ingest_bytes, CorpusFormat, IngestError};
use crate::manifest::Manifest;

const UPLOAD_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub id: String,
    pub state: JobState,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Job {
    id: String,
    dir: PathBuf,
    total: usize,
    completed: AtomicUsize,
    inner: Mutex<JobInner>,
}

struct JobInner {
    state: JobState,
    error: Option<String>,
    /// Records finished so far, with wall time, before the report exists.
    partial: Vec<(RunRecord, f64)>,
    report: Option<Arc<ComparisonReport>>,
    timings: Option<Arc<Timings>>,
}

impl Job {
    fn handle(&self) -> JobHandle {
        let inner = self.inner.lock().unwrap();
        JobHandle {
            id: self.id.clone(),
            state: inner.state,
            progress: Progress {
                completed: self.completed.load(Ordering::SeqCst),
                total: self.total,
            },
            error: inner.error.clone(),
        }
    }

    /// Moves the state forward; a job never goes back.
    fn advance(&self, state: JobState, error: Option<String>) {
        {
            let mut inner = self.inner.lock().unwrap();
            inner.state = state;
            inner.error = error;
        }
        if let Err(e) = write_json(&self.dir.join("status.json"), &self.handle()) {
            tracing::warn!(job = %self.id, error = %e, "could not persist job status");
        }
    }
}

impl Observer for Job {
    fn record_done(&self, record: &RunRecord, wall_ms: f64, completed: usize, _total: usize) {
        self.inner.lock().unwrap().partial.push((record.clone(), wall_ms));
        self.completed.store(completed, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub run_concurrency: usize,
    pub query_concurrency: usize,
    pub ui_dir: Option<PathBuf>,
}

pub struct AppState {
    registry: RwLock<SourceRegistry>,
    manifest: Manifest,
    llm: Arc<dyn Llm>,
    jobs: Mutex<HashMap<String, Arc<Job>>>,
    order: Mutex<Vec<String>>,
    permits: Arc<Semaphore>,
    data_dir: PathBuf,
    query_concurrency: usize,
    ui_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UploadMeta {
    name: String,
    profile: String,
    format: CorpusFormat,
    file: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

impl AppState {
    /// Loads every manifest source, re-ingests persisted uploads and restores
    /// finished runs from `data_dir`.
    pub fn open(config: &ServiceConfig, llm: Arc<dyn Llm>) -> Result<Self> {
        let manifest = match &config.manifest {
            Some(path) => Manifest::load(path)?,
            None => Manifest::default(),
        };
        let names: Vec<String> = manifest.sources.iter().map(|s| s.name.clone()).collect();
        let mut registry = manifest.build_registry(&names)?;

        let sources_dir = config.data_dir.join("sources");
        std::fs::create_dir_all(&sources_dir).with_context(|| format!("creating {}", sources_dir.display()))?;
        let mut metas = Vec::new();
        for entry in std::fs::read_dir(&sources_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "meta") {
                let meta: UploadMeta = serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?;
                metas.push(meta);
            }
        }
        metas.sort_by(|a, b| a.name.cmp(&b.name));
        for meta in metas {
            let bytes = std::fs::read(sources_dir.join(&meta.file))?;
            match ingest_bytes(&mut registry, &bytes, meta.format, &meta.name, &meta.profile) {
                Ok(_) => {}
                Err(e) => tracing::warn!(source = %meta.name, error = %e, "skipping stored upload"),
            }
        }

        let state = Self {
            registry: RwLock::new(registry),
            manifest,
            llm,
            jobs: Mutex::new(HashMap::new()),
            order: Mutex::new(Vec::new()),
            permits: Arc::new(Semaphore::new(config.run_concurrency.max(1))),
            data_dir: config.data_dir.clone(),
            query_concurrency: config.query_concurrency.max(1),
            ui_dir: config.ui_dir.clone(),
        };
        state.restore_runs()?;
        Ok(state)
    }

    fn restore_runs(&self) -> Result<()> {
        let runs = self.data_dir.join("runs");
        std::fs::create_dir_all(&runs)?;
        let mut found = Vec::new();
        for entry in std::fs::read_dir(&runs)? {
            let dir = entry?.path();
            let Ok(text) = std::fs::read_to_string(dir.join("status.json")) else { continue };
            let Ok(handle) = serde_json::from_str::<JobHandle>(&text) else { continue };
            let modified = std::fs::metadata(dir.join("config.json")).and_then(|m| m.modified()).ok();
            found.push((modified, handle, dir));
        }
        found.sort_by(|a, b| (a.0, &a.1.id).cmp(&(b.0, &b.1.id)));
        for (_, handle, dir) in found {
            let (state, error, report, timings) = match handle.state {
                JobState::Done => {
                    let report = read_report(&dir.join("report.json"))?;
                    let timings: Timings = serde_json::from_str(&std::fs::read_to_string(dir.join("timings.json"))?)?;
                    (JobState::Done, None, Some(Arc::new(report)), Some(Arc::new(timings)))
                }
                JobState::Failed => (JobState::Failed, handle.error.clone(), None, None),
                JobState::Queued | JobState::Running => {
                    (JobState::Failed, Some("interrupted by a service restart".into()), None, None)
                }
            };
            let job = Arc::new(Job {
                id: handle.id.clone(),
                dir,
                total: handle.progress.total,
                completed: AtomicUsize::new(if state == JobState::Done { handle.progress.total } else { handle.progress.completed }),
                inner: Mutex::new(JobInner { state, error, partial: Vec::new(), report, timings }),
            });
            if handle.state != state {
                job.advance(state, job.handle().error);
            }
            self.order.lock().unwrap().push(job.id.clone());
            self.jobs.lock().unwrap().insert(job.id.clone(), job);
        }
        Ok(())
    }

    fn job(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    pub fn profiles(&self) -> Vec<SourceProfile> {
        self.registry.read().unwrap().profiles()
    }

    /// Turns a request body into concrete sources and sampled queries.
    fn resolve(&self, config: &EvalConfig) -> Result<ResolvedEval, Vec<FieldError>> {
        config.validate()?;
        let field = |field: &str, message: String| vec![FieldError { field: field.into(), message }];
        let preset = match &config.preset {
            Some(name) => Some(
                self.manifest
                    .preset(name)
                    .ok_or_else(|| field("preset", format!("unknown preset {name}")))?,
            ),
            None => None,
        };
        let mut sources = match (&config.sources, preset) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => p.sources.clone(),
            (None, None) => self.registry.read().unwrap().names().into_iter().map(String::from).collect(),
        };
        for extra in &config.extra_sources {
            if !sources.contains(extra) {
                sources.push(extra.clone());
            }
        }
        let registry = self.registry.read().unwrap();
        let unknown: Vec<FieldError> = sources
            .iter()
            .filter(|s| registry.get(s).is_none())
            .map(|s| {
                let f = if config.extra_sources.contains(s) {
                    "extra_sources"
                } else if config.sources.is_some() {
                    "sources"
                } else {
                    "preset"
                };
                FieldError { field: f.into(), message: format!("unknown source {s}") }
            })
            .collect();
        drop(registry);
        if !unknown.is_empty() {
            return Err(unknown);
        }
        if sources.is_empty() {
            return Err(field("sources", "no sources selected".into()));
        }
        let dataset: Vec<EvalQuery> = match (&config.queries, preset) {
            (Some(q), _) => q.clone(),
            (None, Some(p)) => self
                .manifest
                .preset_queries(p)
                .map_err(|e| field("preset", format!("{e:#}")))?,
            (None, None) => return Err(field("queries", "either preset or queries is required".into())),
        };
        ResolvedEval::new(sources, dataset, config.sample_size, config.arms.clone()).map_err(|e| vec![e])
    }

    fn submit(self: &Arc<Self>, config: EvalConfig) -> Result<JobHandle, ApiError> {
        let resolved = self.resolve(&config).map_err(ApiError::Fields)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.data_dir.join("runs").join(&id);
        std::fs::create_dir_all(&dir).map_err(ApiError::internal)?;
        write_json(&dir.join("config.json"), &json!({ "request": config, "resolved": resolved })).map_err(ApiError::internal)?;
        let job = Arc::new(Job {
            id: id.clone(),
            dir,
            total: resolved.arms.len() * resolved.queries.len(),
            completed: AtomicUsize::new(0),
            inner: Mutex::new(JobInner {
                state: JobState::Queued,
                error: None,
                partial: Vec::new(),
                report: None,
                timings: None,
            }),
        });
        job.advance(JobState::Queued, None);
        self.jobs.lock().unwrap().insert(id.clone(), job.clone());
        self.order.lock().unwrap().push(id);
        let handle = job.handle();
        let state = self.clone();
        tokio::spawn(async move { state.execute(job, resolved).await });
        Ok(handle)
    }

    async fn execute(self: Arc<Self>, job: Arc<Job>, resolved: ResolvedEval) {
        let Ok(_permit) = self.permits.clone().acquire_owned().await else { return };
        // Snapshot the registry when the job starts; later uploads do not affect it.
        let names: Vec<&str> = resolved.sources.iter().map(String::as_str).collect();
        let snapshot = self.registry.read().unwrap().subset(&names);
        let registry = match snapshot {
            Ok(r) => r,
            Err(e) => return job.advance(JobState::Failed, Some(e)),
        };
        job.advance(JobState::Running, None);
        let llm = self.llm.clone();
        let jobs = self.query_concurrency;
        let worker = job.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let run = run_comparison(&resolved, &registry, llm.as_ref(), &RunOptions { fanout: &Threaded, jobs }, worker.as_ref());
            write_run(&worker.dir, &run).map(|()| run)
        })
        .await;
        match outcome {
            Ok(Ok(run)) => {
                {
                    let mut inner = job.inner.lock().unwrap();
                    inner.report = Some(Arc::new(run.report));
                    inner.timings = Some(Arc::new(run.timings));
                    inner.partial.clear();
                }
                job.advance(JobState::Done, None);
            }
            Ok(Err(e)) => job.advance(JobState::Failed, Some(format!("{e:#}"))),
            Err(e) => job.advance(JobState::Failed, Some(format!("run aborted: {e}"))),
        }
    }

    fn upload(&self, upload: Upload) -> Result<SourceProfile, ApiError> {
        let mut registry = self.registry.write().unwrap();
        let profile = ingest_bytes(&mut registry, &upload.bytes, upload.format, &upload.name, &upload.profile)
            .map_err(ApiError::Ingest)?;
        let dir = self.data_dir.join("sources");
        let file = format!("{}.{}", upload.name, upload.format);
        let meta = UploadMeta {
            name: upload.name.clone(),
            profile: upload.profile,
            format: upload.format,
            file: file.clone(),
        };
        std::fs::write(dir.join(&file), &upload.bytes)
            .map_err(ApiError::internal)
            .and_then(|()| write_json(&dir.join(format!("{}.meta", upload.name)), &meta).map_err(ApiError::internal))?;
        Ok(profile)
    }
}

struct Upload {
    name: String,
    profile: String,
    format: CorpusFormat,
    bytes: Vec<u8>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Ingest(IngestError),
    Fields(Vec<FieldError>),
    Internal(String),
}

impl ApiError {
    fn internal(e: impl std::fmt::Display) -> Self {
        Self::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            Self::NotFound(what) => (StatusCode::NOT_FOUND, json!({ "error": format!("not found: {what}") })),
            Self::BadRequest(message) => (StatusCode::BAD_REQUEST, json!({ "error": message })),
            Self::Ingest(e) => {
                let mut body = json!({ "error": e.to_string() });
                match &e {
                    IngestError::DuplicateSource(name) => {
                        body["error"] = json!("duplicate source");
                        body["source"] = json!(name);
                    }
                    IngestError::MissingColumn(column) => body["column"] = json!(column),
                    IngestError::Record { record, line, message } => {
                        body["record"] = json!(record);
                        body["line"] = json!(line);
                        body["message"] = json!(message);
                    }
                    _ => {}
                }
                (StatusCode::BAD_REQUEST, body)
            }
            Self::Fields(fields) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({
                    "error": fields.iter().map(|f| f.message.as_str()).collect::<Vec<_>>().join("; "),
                    "fields": fields,
                }),
            ),
            Self::Internal(message) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": message })),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = State<Arc<AppState>>;

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn defaults() -> Json<PipelineConfig> {
    Json(PipelineConfig::default())
}

async fn list_sources(State(state): Shared) -> Json<Vec<SourceProfile>> {
    Json(state.profiles())
}

#[derive(Serialize)]
struct PresetView {
    name: String,
    sources: Vec<String>,
    description: Option<String>,
    query_count: Option<usize>,
}

async fn list_presets(State(state): Shared) -> Json<Vec<PresetView>> {
    Json(
        state
            .manifest
            .presets
            .iter()
            .map(|p| PresetView {
                name: p.name.clone(),
                sources: p.sources.clone(),
                description: p.description.clone(),
                query_count: state.manifest.preset_queries(p).ok().map(|q| q.len()),
            })
            .collect(),
    )
}

async fn upload_source(State(state): Shared, mut form: Multipart) -> Result<Json<SourceProfile>, ApiError> {
    let (mut name, mut profile, mut format, mut bytes, mut filename) = (None, None, None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::BadRequest(e.body_text()))? {
        let key = field.name().unwrap_or_default().to_string();
        match key.as_str() {
            "file" => {
                filename = field.file_name().map(String::from);
                bytes = Some(field.bytes().await.map_err(|e| ApiError::BadRequest(e.body_text()))?.to_vec());
            }
            "name" | "profile" | "format" => {
                let text = field.text().await.map_err(|e| ApiError::BadRequest(e.body_text()))?;
                match key.as_str() {
                    "name" => name = Some(text.trim().to_string()),
                    "profile" => profile = Some(text),
                    _ => format = Some(text),
                }
            }
            _ => {}
        }
    }
    let missing = |f: &str| ApiError::BadRequest(format!("missing multipart field `{f}`"));
    let name = name.ok_or_else(|| missing("name"))?;
    let profile = profile.ok_or_else(|| missing("profile"))?;
    let bytes = bytes.ok_or_else(|| missing("file"))?;
    let format = match format.filter(|f| !f.trim().is_empty()) {
        Some(f) => f.parse::<CorpusFormat>().map_err(ApiError::BadRequest)?,
        None => filename
            .as_deref()
            .and_then(|f| CorpusFormat::from_path(Path::new(f)))
            .ok_or_else(|| ApiError::BadRequest("cannot infer format; pass `format` (json or csv)".into()))?,
    };
    let upload = Upload { name, profile, format, bytes };
    let profile = tokio::task::spawn_blocking(move || state.upload(upload))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(profile))
}

async fn list_runs(State(state): Shared) -> Json<Vec<JobHandle>> {
    let order = state.order.lock().unwrap().clone();
    Json(order.iter().filter_map(|id| state.job(id)).map(|j| j.handle()).collect())
}

async fn create_run(State(state): Shared, body: axum::body::Bytes) -> Result<(StatusCode, Json<JobHandle>), ApiError> {
    let config: EvalConfig = serde_json::from_slice(&body).map_err(|e| {
        ApiError::Fields(vec![FieldError { field: "body".into(), message: e.to_string() }])
    })?;
    let handle = state.submit(config)?;
    Ok((StatusCode::ACCEPTED, Json(handle)))
}

#[derive(Serialize)]
struct RunView {
    #[serde(flatten)]
    handle: JobHandle,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<Arc<ComparisonReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings: Option<Arc<Timings>>,
}

async fn get_run(State(state): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<RunView>, ApiError> {
    let job = state.job(&id).ok_or_else(|| ApiError::NotFound(format!("run {id}")))?;
    let handle = job.handle();
    let inner = job.inner.lock().unwrap();
    Ok(Json(RunView {
        handle,
        report: inner.report.clone(),
        timings: inner.timings.clone(),
    }))
}

async fn get_report(State(state): Shared, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let job = state.job(&id).ok_or_else(|| ApiError::NotFound(format!("run {id}")))?;
    if job.handle().state != JobState::Done {
        return Err(ApiError::NotFound(format!("report for run {id} (not finished)")));
    }
    let bytes = tokio::fs::read(job.dir.join("report.json")).await.map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

#[derive(Deserialize)]
struct TraceQuery {
    arm: Option<String>,
}

#[derive(Serialize)]
struct TraceView {
    #[serde(flatten)]
    record: RunRecord,
    wall_time_ms: f64,
}

async fn get_trace(
    State(state): Shared,
    UrlPath((id, query_id)): UrlPath<(String, String)>,
    Query(q): Query<TraceQuery>,
) -> Result<Json<TraceView>, ApiError> {
    let job = state.job(&id).ok_or_else(|| ApiError::NotFound(format!("run {id}")))?;
    let inner = job.inner.lock().unwrap();
    let not_found = || ApiError::NotFound(format!("query {query_id} in run {id}"));
    if let (Some(report), Some(timings)) = (&inner.report, &inner.timings) {
        let record = report.record(q.arm.as_deref(), &query_id).ok_or_else(not_found)?.clone();
        let wall_time_ms = timings.wall_ms(&record.arm, &query_id).unwrap_or(0.0);
        return Ok(Json(TraceView { record, wall_time_ms }));
    }
    inner
        .partial
        .iter()
        .find(|(r, _)| r.query_id == query_id && q.arm.as_deref().is_none_or(|a| a == r.arm))
        .map(|(record, ms)| Json(TraceView { record: record.clone(), wall_time_ms: *ms }))
        .ok_or_else(not_found)
}

pub fn router(state: Arc<AppState>) -> Router {
    let ui_dir = state.ui_dir.clone();
    let api = Router::new()
        .route("/health", get(health))
        .route("/defaults", get(defaults))
        .route("/sources", get(list_sources).post(upload_source))
        .route("/presets", get(list_presets))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/trace/{query_id}", get(get_trace))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(listener: TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .context("serving HTTP")
}
