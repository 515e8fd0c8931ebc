//! HTTP front end for the annotation workflow, plus the gate endpoint.
//!
//! All routes speak JSON except `GET /export/gold`, which streams the gold
//! records as JSON Lines. When a shared token is configured every API route
//! requires it in the [`TOKEN_HEADER`] header; static files stay public.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use impact_core::annotation::{AnnotationError, AnnotationRecord, Role, Store, TaskStateKind};
use impact_core::gate::{assess, Policy};
use impact_core::gateway::Backend;
use impact_core::prompt::{ExemplarBank, Strategy};
use impact_core::trace::{Trace, TraceSource};

pub const TOKEN_HEADER: &str = "x-impact-token";
pub const IMAGE_PREFIX: &str = "/images";

/// Everything `POST /assess` needs to classify a trace.
pub struct Gate {
    pub strategy: Strategy,
    pub backend: Box<dyn Backend>,
    pub policy: Policy,
    pub bank: Option<ExemplarBank>,
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub gate: Option<Arc<Gate>>,
    pub token: Option<Arc<str>>,
}

#[derive(Debug, Clone, Default)]
pub struct StaticDirs {
    /// Built annotator UI, served at `/`.
    pub ui: Option<PathBuf>,
    /// Screenshot root, served under [`IMAGE_PREFIX`].
    pub images: Option<PathBuf>,
}

pub struct ApiError(StatusCode, &'static str, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "bad_request", msg.into())
    }

    fn not_found(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::NOT_FOUND, "not_found", msg.into())
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        use AnnotationError::*;
        let (status, code) = match &e {
            UnknownAnnotator(_) => (StatusCode::NOT_FOUND, "unknown_annotator"),
            UnknownTrace(_) => (StatusCode::NOT_FOUND, "unknown_trace"),
            DuplicateId(_) => (StatusCode::CONFLICT, "duplicate_id"),
            DuplicateSubmission { .. } => (StatusCode::CONFLICT, "duplicate_submission"),
            TraceClosed(_) => (StatusCode::CONFLICT, "trace_closed"),
            WrongState { .. } => (StatusCode::CONFLICT, "wrong_state"),
            AdjudicatorConflict(_) => (StatusCode::CONFLICT, "adjudicator_conflict"),
            NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
            Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation_error"),
            TraceMismatch(..) => (StatusCode::UNPROCESSABLE_ENTITY, "trace_mismatch"),
            Io(_) | CorruptLog { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage_error"),
        };
        ApiError(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            tracing::error!(code = self.1, "{}", self.2);
        }
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a store call off the async executor; log appends may block.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, AnnotationError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Deserialize)]
struct NewAnnotator {
    id: String,
    role: Role,
}

async fn register(State(s): State<AppState>, Json(body): Json<NewAnnotator>) -> Result<impl IntoResponse, ApiError> {
    let store = s.store.clone();
    let id = body.id.clone();
    blocking(move || store.register_annotator(&body.id, body.role)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "role": body.role }))))
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_task(State(s): State<AppState>, Query(q): Query<NextQuery>) -> ApiResult<serde_json::Value> {
    let annotator = q.annotator.ok_or_else(|| ApiError::bad_request("missing `annotator` query parameter"))?;
    let store = s.store.clone();
    let task = blocking(move || store.next_task(&annotator)).await?;
    Ok(Json(json!({ "task": task })))
}

#[derive(Serialize)]
struct TraceView {
    trace: Trace,
    image_urls: Vec<String>,
    task: Option<impact_core::annotation::TaskState>,
    /// Primary records, shown only once the trace awaits adjudication.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    records: Vec<AnnotationRecord>,
}

async fn get_trace(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<TraceView> {
    let trace = s.store.trace(&id).ok_or_else(|| ApiError::not_found(format!("unknown trace `{id}`")))?;
    let task = s.store.task_state(&id);
    let records = match &task {
        Some(t) if t.state == TaskStateKind::NeedsAdjudication => s.store.records(&id),
        _ => Vec::new(),
    };
    let image_urls = trace
        .screens
        .iter()
        .map(|sc| format!("{IMAGE_PREFIX}/{}", sc.image.trim_start_matches('/')))
        .collect();
    Ok(Json(TraceView { trace: (*trace).clone(), image_urls, task, records }))
}

async fn submit_annotation(
    State(s): State<AppState>,
    Json(record): Json<AnnotationRecord>,
) -> ApiResult<impact_core::annotation::TaskState> {
    let store = s.store.clone();
    blocking(move || store.submit_annotation(record)).await.map(Json)
}

async fn pending(State(s): State<AppState>) -> ApiResult<Vec<impact_core::annotation::TaskState>> {
    Ok(Json(s.store.pending_adjudications()))
}

async fn submit_adjudication(
    State(s): State<AppState>,
    Json(record): Json<AnnotationRecord>,
) -> ApiResult<impact_core::annotation::GoldRecord> {
    let store = s.store.clone();
    blocking(move || store.submit_adjudication(record)).await.map(Json)
}

#[derive(Deserialize)]
struct ExportQuery {
    source: Option<String>,
}

fn source_filter(q: &ExportQuery) -> Result<Option<TraceSource>, ApiError> {
    q.source
        .as_deref()
        .map(|s| {
            serde_json::from_value::<TraceSource>(json!(s))
                .ok()
                .filter(|src| *src != TraceSource::Other || s == "other")
                .ok_or_else(|| ApiError::bad_request(format!("unknown source `{s}`")))
        })
        .transpose()
}

async fn export_gold(State(s): State<AppState>, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    let export = s.store.export_gold(source_filter(&q)?);
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"))],
        export.to_jsonl(),
    )
        .into_response())
}

async fn export_summary(
    State(s): State<AppState>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<impact_core::annotation::ExportSummary> {
    Ok(Json(s.store.export_gold(source_filter(&q)?).summary))
}

async fn taxonomy(State(s): State<AppState>) -> Response {
    (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        s.store.taxonomy().to_json(),
    )
        .into_response()
}

#[derive(Deserialize)]
struct AssessBody {
    trace_id: Option<String>,
    trace: Option<Trace>,
}

async fn assess_route(State(s): State<AppState>, Json(body): Json<AssessBody>) -> Result<Response, ApiError> {
    let gate = s
        .gate
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "gate_unconfigured", "no backend configured for /assess".into()))?;
    let trace = match (body.trace, body.trace_id) {
        (Some(t), _) => t
            .normalize()
            .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", e.to_string()))?,
        (None, Some(id)) => {
            let t = s.store.trace(&id).ok_or_else(|| ApiError::not_found(format!("unknown trace `{id}`")))?;
            (*t).clone()
        }
        (None, None) => return Err(ApiError::bad_request("body needs `trace` or `trace_id`")),
    };
    let store = s.store.clone();
    let assessment = tokio::task::spawn_blocking(move || {
        assess(&trace, gate.strategy, gate.backend.as_ref(), store.taxonomy(), gate.bank.as_ref(), &gate.policy)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(Json(assessment).into_response())
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &s.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_ref()) {
            return ApiError(StatusCode::UNAUTHORIZED, "unauthorized", format!("missing or wrong `{TOKEN_HEADER}` header"))
                .into_response();
        }
    }
    next.run(req).await
}

/// API routes only.
pub fn api_router(state: AppState) -> Router {
    Router::new()
        .route("/annotators", post(register))
        .route("/tasks/next", get(next_task))
        .route("/traces/{id}", get(get_trace))
        .route("/annotations", post(submit_annotation))
        .route("/adjudications/pending", get(pending))
        .route("/adjudications", post(submit_adjudication))
        .route("/export/gold", get(export_gold))
        .route("/export/summary", get(export_summary))
        .route("/taxonomy", get(taxonomy))
        .route("/assess", post(assess_route))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// API plus screenshot and UI hosting.
pub fn app(state: AppState, dirs: &StaticDirs) -> Router {
    let mut router = api_router(state);
    if let Some(images) = &dirs.images {
        router = router.nest_service(IMAGE_PREFIX, ServeDir::new(images));
    }
    if let Some(ui) = &dirs.ui {
        router = router.fallback_service(ServeDir::new(ui));
    }
    router
}

/// Serves until `shutdown` resolves, then flushes the event log.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    store: Arc<Store>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await?;
    store.sync().map_err(|e| std::io::Error::other(e.to_string()))
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
