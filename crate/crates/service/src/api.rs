//! JSON and server-sent-event API over the store and the run manager.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::map_response;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tapes::agent::AgentConfig;
use tapes::environment::EnvConfig;
use tapes::orchestrator::LoopConfig;
use tapes::tape::codec::{step_from_document, tape_to_value};
use tapes::tape::{diff, DecodeMode, StepRegistry};
use tokio::sync::broadcast::error::RecvError;
use tracing::info;

use crate::runs::{RunEvent, RunManager};
use crate::store::StoreError;
use crate::ServiceError;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(error: ServiceError) -> Self {
        let status = match &error {
            ServiceError::Store(StoreError::NotFound(_)) | ServiceError::UnknownRun(_) => StatusCode::NOT_FOUND,
            ServiceError::Store(StoreError::BadId(_) | StoreError::Tape(_))
            | ServiceError::Tape(_)
            | ServiceError::Agent(_)
            | ServiceError::Env(_)
            | ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, error.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(error: StoreError) -> Self {
        ServiceError::from(error).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    runs: Arc<RunManager>,
}

pub fn router(runs: Arc<RunManager>) -> Router {
    Router::new()
        .route("/api/tapes", get(list_tapes))
        .route("/api/tapes/{id}", get(get_tape))
        .route("/api/tapes/{id}/fork", post(fork_tape))
        .route("/api/runs", get(list_runs).post(start_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/events", get(run_events))
        .route("/api/diff", get(diff_tapes))
        .route("/api/llm_calls/{prompt_id}", get(get_llm_call))
        .layer(map_response(allow_any_origin))
        .with_state(AppState { runs })
}

async fn allow_any_origin(mut response: Response) -> Response {
    response
        .headers_mut()
        .insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    response
}

pub async fn serve(runs: Arc<RunManager>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(runs)).await
}

async fn list_tapes(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let entries = state.runs.store().list()?;
    Ok(Json(json!(entries)))
}

async fn get_tape(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let tape = state.runs.store().load(&id)?;
    Ok(Json(tape_to_value(&tape)))
}

#[derive(Deserialize)]
struct ForkRequest {
    index: usize,
    replacement: Value,
    #[serde(default = "default_author")]
    author: String,
}

fn default_author() -> String {
    "studio".into()
}

async fn fork_tape(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<ForkRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut replacement = request.replacement;
    if let Some(doc) = replacement.as_object_mut() {
        doc.entry("metadata").or_insert_with(|| json!({"id": ""}));
    }
    let step = step_from_document(&StepRegistry::default(), replacement, DecodeMode::Lenient)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let child = state.runs.store().fork(&id, request.index, step, &request.author)?;
    Ok((StatusCode::CREATED, Json(tape_to_value(&child))))
}

#[derive(Deserialize)]
struct RunRequest {
    agent_config: AgentConfig,
    tape_id: String,
    #[serde(default)]
    env_config: EnvConfig,
    #[serde(default)]
    loop_config: Option<LoopConfig>,
}

async fn start_run(State(state): State<AppState>, Json(request): Json<RunRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    let handle = state.runs.start_run(
        request.agent_config,
        &request.tape_id,
        request.env_config,
        request.loop_config.unwrap_or_default(),
    )?;
    Ok((StatusCode::CREATED, Json(json!({"run_id": handle.run_id}))))
}

async fn list_runs(State(state): State<AppState>) -> Json<Value> {
    Json(json!(state.runs.list()))
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let handle = state.runs.get(&id).ok_or(ServiceError::UnknownRun(id))?;
    Ok(Json(json!(handle)))
}

fn sse_event(event: &RunEvent) -> Result<Event, Infallible> {
    let data = serde_json::to_string(event).expect("events serialize");
    Ok(Event::default().event(event.kind.clone()).data(data))
}

async fn run_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let subscription = state.runs.subscribe(&id).ok_or(ServiceError::UnknownRun(id))?;
    let live = stream::unfold(subscription.live, |receiver| async move {
        let mut receiver = receiver?;
        loop {
            match receiver.recv().await {
                Ok(event) => {
                    let next = (!event.is_terminal()).then_some(receiver);
                    return Some((event, next));
                }
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return None,
            }
        }
    });
    let events = stream::iter(subscription.backlog).chain(live);
    Ok(Sse::new(events.map(|e| sse_event(&e))).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct DiffQuery {
    a: String,
    b: String,
}

async fn diff_tapes(State(state): State<AppState>, Query(query): Query<DiffQuery>) -> ApiResult<Json<Value>> {
    let store = state.runs.store();
    let report = diff(&store.load(&query.a)?, &store.load(&query.b)?);
    Ok(Json(json!(report)))
}

async fn get_llm_call(State(state): State<AppState>, Path(prompt_id): Path<String>) -> ApiResult<Json<Value>> {
    match state.runs.db().find(&prompt_id).map_err(ServiceError::from)? {
        Some(record) => Ok(Json(json!(record))),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no call `{prompt_id}`"))),
    }
}
