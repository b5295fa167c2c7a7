//! Job service: trip uploads are queued, estimated by a background worker
//! and served back as archives and map layers.
//!
//! Routes:
//! - `POST /jobs` multipart with a `trips` file and optional `params` JSON
//! - `GET /jobs`, `GET /jobs/{id}`
//! - `GET /jobs/{id}/layers?period=N|aggregate|HH:MM-HH:MM`
//! - `GET /jobs/{id}/archive`
//! - `POST /archives` with an archive as the body

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use demand_core::archive::{layers, Archive, LayerSelection, LayerSet};
use demand_core::ingest::parse_trips;
use demand_core::pipeline::{self, EstimateParams, FieldError, PipelineError};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Mutex};

pub use store::{JobFailure, JobProgress, JobRecord, JobSource, JobState, JobStore, StoreError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workspace: PathBuf,
    /// Jobs run concurrently; one keeps execution strictly FIFO.
    pub workers: usize,
    pub max_upload_bytes: usize,
}

impl ServiceConfig {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        Self {
            workspace: workspace.into(),
            workers: 1,
            max_upload_bytes: 1 << 30,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<JobStore>,
    queue: mpsc::UnboundedSender<String>,
    max_upload_bytes: usize,
}

impl AppState {
    /// Opens the workspace, re-queues unfinished jobs and starts the
    /// workers. Must be called inside a tokio runtime.
    pub fn start(config: &ServiceConfig) -> Result<Self, StoreError> {
        let (store, pending) = JobStore::open(&config.workspace)?;
        let store = Arc::new(store);
        let (tx, rx) = mpsc::unbounded_channel();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..config.workers.max(1) {
            tokio::spawn(worker(store.clone(), rx.clone()));
        }
        for id in pending {
            tracing::info!(job = %id, "re-queueing unfinished job");
            let _ = tx.send(id);
        }
        Ok(Self {
            store,
            queue: tx,
            max_upload_bytes: config.max_upload_bytes,
        })
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }
}

async fn worker(store: Arc<JobStore>, rx: Arc<Mutex<mpsc::UnboundedReceiver<String>>>) {
    loop {
        let next = rx.lock().await.recv().await;
        let Some(id) = next else { break };
        let (s, job) = (store.clone(), id.clone());
        if let Err(e) = tokio::task::spawn_blocking(move || execute(&s, &job)).await {
            let failure = JobFailure {
                message: format!("worker crashed: {e}"),
                fields: Vec::new(),
                ingest: None,
            };
            if let Err(e) = store.fail(&id, failure) {
                tracing::error!(job = %id, error = %e, "could not record failure");
            }
        }
    }
}

fn execute(store: &JobStore, id: &str) {
    let result = store.start(id).map_err(|e| failure(e.to_string())).and_then(|(params, input)| {
        tracing::info!(job = id, bytes = input.len(), "job started");
        pipeline::run(&input, &params, |p| store.progress(id, p)).map_err(pipeline_failure)
    });
    let recorded = match result {
        Ok(out) => store.finish(id, out.archive),
        Err(f) => {
            tracing::warn!(job = id, error = %f.message, "job failed");
            store.fail(id, f)
        }
    };
    if let Err(e) = recorded {
        tracing::error!(job = id, error = %e, "could not record job outcome");
    }
}

fn failure(message: String) -> JobFailure {
    JobFailure {
        message,
        fields: Vec::new(),
        ingest: None,
    }
}

fn pipeline_failure(e: PipelineError) -> JobFailure {
    let message = e.to_string();
    match e {
        PipelineError::InvalidParams(fields) => JobFailure {
            message,
            fields,
            ingest: None,
        },
        PipelineError::NoTrips(report) => JobFailure {
            message,
            fields: Vec::new(),
            ingest: Some(*report),
        },
        _ => failure(message),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("job {id} is {state:?}, not done")]
    NotDone { id: String, state: JobState },
    #[error("request has invalid fields")]
    Validation(Vec<FieldError>),
    #[error("{0}")]
    BadRequest(String),
    #[error("archive rejected: {0}")]
    BadArchive(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::NotFound(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::NotDone { .. } => (StatusCode::CONFLICT, "not_done"),
            ApiError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_fields"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::BadArchive(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_archive"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let message = self.to_string();
        let fields = match self {
            ApiError::Validation(f) => f,
            _ => Vec::new(),
        };
        let body = ErrorBody {
            error: code.into(),
            message,
            fields,
        };
        (status, Json(body)).into_response()
    }
}

fn field(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

/// Parses the parameter document, naming the offending key on failure.
pub fn parse_params(text: &str) -> Result<EstimateParams, Vec<FieldError>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| vec![field("params", format!("not valid JSON: {e}"))])?;
    let params: EstimateParams = match serde_json::from_value(value.clone()) {
        Ok(p) => p,
        Err(whole) => {
            let serde_json::Value::Object(map) = value else {
                return Err(vec![field("params", "expected a JSON object")]);
            };
            let errors: Vec<FieldError> = map
                .into_iter()
                .filter_map(|(k, v)| {
                    let single = serde_json::Value::Object([(k.clone(), v)].into_iter().collect());
                    serde_json::from_value::<EstimateParams>(single).err().map(|e| {
                        let message = e.to_string();
                        field(&k, message.split(" at line").next().unwrap_or(&message))
                    })
                })
                .collect();
            return Err(if errors.is_empty() { vec![field("params", whole.to_string())] } else { errors });
        }
    };
    params.validate()?;
    Ok(params)
}

/// Checks that the header names every required column.
fn check_header(input: &[u8], params: &EstimateParams) -> Result<(), FieldError> {
    if input.iter().all(u8::is_ascii_whitespace) {
        return Err(field("trips", "file is empty"));
    }
    let end = input.iter().position(|&b| b == b'\n').map_or(input.len(), |p| p + 1);
    parse_trips(&input[..end], &params.schema())
        .map(|_| ())
        .map_err(|e| field("trips", e.to_string()))
}

async fn submit_job(State(state): State<AppState>, mut multipart: Multipart) -> Result<Response, ApiError> {
    let mut params_text = None;
    let mut trips = None;
    while let Some(part) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::BadRequest(format!("malformed upload: {e}")))?
    {
        let name = part.name().unwrap_or_default().to_string();
        let bytes = part
            .bytes()
            .await
            .map_err(|e| ApiError::BadRequest(format!("could not read part {name:?}: {e}")))?;
        match name.as_str() {
            "params" => params_text = Some(String::from_utf8_lossy(&bytes).into_owned()),
            "trips" | "dataset" => trips = Some(bytes),
            other => return Err(ApiError::Validation(vec![field(other, "unexpected form field")])),
        }
    }

    let mut errors = Vec::new();
    let params = match params_text.as_deref().map(parse_params) {
        None => Some(EstimateParams::default()),
        Some(Ok(p)) => Some(p),
        Some(Err(mut e)) => {
            errors.append(&mut e);
            None
        }
    };
    match (&trips, &params) {
        (None, _) => errors.push(field("trips", "a trip file is required")),
        (Some(bytes), Some(p)) => {
            if let Err(e) = check_header(bytes, p) {
                errors.push(e);
            }
        }
        _ => {}
    }
    if !errors.is_empty() {
        return Err(ApiError::Validation(errors));
    }
    let (params, trips) = (params.expect("checked"), trips.expect("checked"));

    let store = state.store.clone();
    let record = tokio::task::spawn_blocking(move || store.create_job(params, &trips))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    state
        .queue
        .send(record.id.clone())
        .map_err(|_| ApiError::Internal("job queue is closed".into()))?;
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn list_jobs(State(state): State<AppState>) -> Json<Vec<JobRecord>> {
    Json(state.store.list())
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    Ok(Json(state.store.get(&id)?))
}

fn require_done(state: &AppState, id: &str) -> Result<JobRecord, ApiError> {
    let record = state.store.get(id)?;
    if record.state != JobState::Done {
        return Err(ApiError::NotDone {
            id: id.into(),
            state: record.state,
        });
    }
    Ok(record)
}

#[derive(Deserialize)]
struct LayerQuery {
    period: Option<String>,
}

async fn job_layers(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<LayerQuery>,
) -> Result<Json<LayerSet>, ApiError> {
    require_done(&state, &id)?;
    let raw = q.period.unwrap_or_else(|| "aggregate".into());
    let selection = LayerSelection::parse(&raw).ok_or_else(|| {
        ApiError::Validation(vec![field("period", format!("expected N, aggregate or HH:MM-HH:MM, got {raw:?}"))])
    })?;
    let store = state.store.clone();
    let archive = tokio::task::spawn_blocking(move || store.archive(&id))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    layers(&archive, selection)
        .map(Json)
        .map_err(|e| ApiError::Validation(vec![field("period", e.to_string())]))
}

async fn job_archive(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    require_done(&state, &id)?;
    let text = state.store.archive_text(&id)?;
    let disposition = format!("attachment; filename=\"{id}.csv\"");
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        text,
    )
        .into_response())
}

async fn upload_archive(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::BadArchive("archive is not UTF-8 text".into()))?;
    let archive = Archive::parse(&text).map_err(|e| ApiError::BadArchive(e.to_string()))?;
    let store = state.store.clone();
    let record = tokio::task::spawn_blocking(move || store.import_archive(&text, archive))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: AppState) -> Router {
    let limit = state.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/layers", get(job_layers))
        .route("/jobs/{id}/archive", get(job_archive))
        .route("/archives", post(upload_archive))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::start(&config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, workspace = %config.workspace.display(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
