//! JSON API consumed by the review UI and by operators.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;

use super::{JobKind, JobState, ReviewDecision, Service, ServiceError, Verdict};
use crate::assembly::Stage;

pub const QUEUE_DEPTH_HEADER: &str = "x-queue-depth";

#[derive(Clone)]
struct AppState {
    service: Arc<Service>,
    workers: Arc<Semaphore>,
}

pub struct ApiError(StatusCode, String, String);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self(status, code.into(), message.into())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownJob(_) | ServiceError::UnknownItem(_) | ServiceError::UnknownRecord(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::AlreadyDecided(_) => StatusCode::CONFLICT,
            ServiceError::InvalidParams(_) | ServiceError::MissingEditedText => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Config(_) | ServiceError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.code().into(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the router. Jobs submitted through it run on blocking threads,
/// at most `service.workers` at once.
pub fn router(service: Arc<Service>) -> Router {
    app(AppState::new(service))
}

impl AppState {
    fn new(service: Arc<Service>) -> Self {
        let workers = Arc::new(Semaphore::new(service.config().service.workers.max(1)));
        Self { service, workers }
    }
}

fn app(state: AppState) -> Router {
    Router::new()
        .route("/jobs", post(create_job))
        .route("/jobs/:job_id", get(get_job))
        .route("/review/next", get(next_review))
        .route("/review/:item_id/decision", post(decide))
        .route("/stats", get(stats))
        .route("/manifests/:stage", get(manifest))
        .route("/images/:file", get(image))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(st): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &st.service.config().service.token {
        let given =
            headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

fn spawn_job(st: &AppState, job_id: String) {
    let st = st.clone();
    tokio::spawn(async move {
        let Ok(_permit) = st.workers.clone().acquire_owned().await else { return };
        let svc = st.service.clone();
        let id = job_id.clone();
        match tokio::task::spawn_blocking(move || svc.execute_job(&id)).await {
            Ok(Err(e)) => tracing::error!(job_id, error = %e, "job execution error"),
            Err(e) => tracing::error!(job_id, error = %e, "job task panicked"),
            Ok(Ok(_)) => {}
        }
    });
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    kind: String,
    #[serde(default)]
    params: serde_json::Value,
    #[serde(default)]
    idempotency_key: Option<String>,
}

async fn create_job(State(st): State<AppState>, body: axum::body::Bytes) -> ApiResult<Response> {
    let req: JobRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidParams", e.to_string()))?;
    let kind: JobKind =
        req.kind.parse().map_err(|e: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidParams", e))?;
    let svc = st.service.clone();
    let (job, created) = tokio::task::spawn_blocking(move || svc.submit_job(kind, req.params, req.idempotency_key))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    if created {
        spawn_job(&st, job.job_id.clone());
        Ok((StatusCode::ACCEPTED, Json(job)).into_response())
    } else {
        Ok((StatusCode::OK, Json(job)).into_response())
    }
}

async fn get_job(State(st): State<AppState>, Path(job_id): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.service.job(&job_id)?).into_response())
}

#[derive(Deserialize)]
struct NextQuery {
    #[serde(default)]
    reviewer: Option<String>,
}

async fn next_review(State(st): State<AppState>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    let reviewer = q.reviewer.unwrap_or_else(|| "anonymous".into());
    // Queue depth travels in a header so the body stays a plain ReviewItem.
    Ok(match st.service.next_review(&reviewer) {
        Some((item, depth)) => ([(QUEUE_DEPTH_HEADER, depth.to_string())], Json(item)).into_response(),
        None => (StatusCode::NO_CONTENT, [(QUEUE_DEPTH_HEADER, "0".to_string())]).into_response(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    verdict: Verdict,
    #[serde(default)]
    edited_text: Option<String>,
    #[serde(default)]
    reviewer: Option<String>,
    #[serde(default)]
    idempotency_key: Option<String>,
}

async fn decide(
    State(st): State<AppState>,
    Path(item_id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let b: DecisionBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidParams", e.to_string()))?;
    let decision = ReviewDecision {
        item_id,
        verdict: b.verdict,
        edited_text: b.edited_text,
        reviewer: b.reviewer.unwrap_or_default(),
        idempotency_key: b.idempotency_key,
        decided_at: chrono::Utc::now(),
    };
    let svc = st.service.clone();
    let item = tokio::task::spawn_blocking(move || svc.apply_decision(decision))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(item).into_response())
}

async fn stats(State(st): State<AppState>) -> ApiResult<Response> {
    let svc = st.service.clone();
    let s = tokio::task::spawn_blocking(move || svc.stats())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    Ok(Json(s).into_response())
}

async fn manifest(State(st): State<AppState>, Path(stage): Path<String>) -> ApiResult<Response> {
    let stage: Stage = stage.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, "UnknownStage", e))?;
    let path = st.service.manifest_path(stage);
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")], bytes).into_response()),
        Err(_) => {
            Err(ApiError::new(StatusCode::NOT_FOUND, "NotAssembled", format!("stage {stage} has not been assembled")))
        }
    }
}

async fn image(State(st): State<AppState>, Path(file): Path<String>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "UnknownRecord", format!("no image `{file}`"));
    let id = file.strip_suffix(".png").filter(|id| !id.is_empty() && id.bytes().all(|b| b.is_ascii_hexdigit()));
    let Some(id) = id else { return Err(not_found()) };
    match tokio::fs::read(st.service.image_file(id)).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()),
        Err(_) => Err(not_found()),
    }
}

/// Serves until the process is stopped. Jobs still queued from an earlier
/// run are started first.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(service, listener).await
}

pub async fn serve_on(service: Arc<Service>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let queued: Vec<String> =
        service.jobs().into_iter().filter(|j| j.state == JobState::Queued).map(|j| j.job_id).collect();
    let st = AppState::new(service);
    for id in queued {
        spawn_job(&st, id);
    }
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, app(st)).await
}
