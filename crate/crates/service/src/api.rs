//! HTTP routes over the session store.

use crate::session::{Command, EpisodeRequest, FitSummary, Frame, InputDelta, MissionSession, SessionError};
use crate::store::{SessionHandle, SessionStore};
use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, StreamExt};
use searchgrid_core::scenario::{CacheStatus, Scenario, ScenarioError};
use serde::{Deserialize, Serialize};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;
use tokio::sync::broadcast;

pub const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session: String,
    pub cache: CacheStatus,
    pub fit: FitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

pub struct ApiError(pub SessionError);

impl<E: Into<SessionError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use SessionError as E;
        let (status, kind, path) = match &self.0 {
            E::Scenario(ScenarioError::Schema { path, .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "schema", Some(path.clone())),
            E::Scenario(ScenarioError::Invalid { path, .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid", Some(path.clone())),
            E::Scenario(ScenarioError::Io(_) | ScenarioError::Cache(_)) => (StatusCode::INTERNAL_SERVER_ERROR, "storage", None),
            E::Scenario(_) => (StatusCode::UNPROCESSABLE_ENTITY, "fit", None),
            E::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
            E::UnknownCommand(_) => (StatusCode::NOT_FOUND, "unknown_command", None),
            E::NoEpisode => (StatusCode::CONFLICT, "no_episode", None),
            E::EpisodeRunning => (StatusCode::CONFLICT, "episode_running", None),
            E::BadStart { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "bad_start", None),
            E::Body(_) => (StatusCode::BAD_REQUEST, "body", None),
            E::Plan(_) | E::Model(_) => (StatusCode::INTERNAL_SERVER_ERROR, "planner", None),
            E::Persist(_) => (StatusCode::INTERNAL_SERVER_ERROR, "persist", None),
        };
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
            path,
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/grid", get(grid))
        .route("/sessions/{id}/reward-map", get(reward_map))
        .route("/sessions/{id}/inputs", post(submit_inputs))
        .route("/sessions/{id}/stream", get(stream_frames))
        .route("/sessions/{id}/{action}", post(episode))
        .with_state(store)
}

/// Runs `f` on the blocking pool while holding the session's write lock.
async fn with_session<T, F>(handle: SessionHandle, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut MissionSession) -> Result<T, SessionError> + Send + 'static,
{
    let mut guard = handle.write_owned().await;
    tokio::task::spawn_blocking(move || f(&mut guard))
        .await
        .map_err(|e| ApiError(SessionError::Persist(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

fn parse_body<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> Result<T, SessionError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| SessionError::Body(e.to_string()))
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| SessionError::Body(e.to_string()))?;
    let scenario = Scenario::from_json(text)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let cache_dir = store.cache_dir().map(|p| p.to_path_buf());
    let session = tokio::task::spawn_blocking(move || MissionSession::create(id, scenario, cache_dir.as_deref()))
        .await
        .map_err(|e| SessionError::Persist(format!("worker failed: {e}")))??;
    let created = CreatedSession {
        session: session.id().to_string(),
        cache: session.cache_status(),
        fit: session.summary(),
    };
    store.insert(session)?;
    log::info!("created session {} ({:?})", created.session, created.cache);
    Ok((StatusCode::CREATED, Json(created)))
}

async fn list_sessions(State(store): State<Arc<SessionStore>>) -> Json<Vec<String>> {
    Json(store.ids())
}

async fn grid(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = store.get(&id)?;
    let info = handle.read().await.grid_info();
    Ok(Json(info).into_response())
}

async fn reward_map(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = store.get(&id)?;
    let raster = handle.read().await.raster();
    Ok(Json(raster).into_response())
}

async fn submit_inputs(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> Result<Json<FitSummary>, ApiError> {
    let delta: InputDelta = parse_body(&body)?;
    let handle = store.get(&id)?;
    let summary = with_session(handle, move |s| {
        let summary = s.submit_inputs(&delta)?;
        store.save(s)?;
        Ok(summary)
    })
    .await?;
    Ok(Json(summary))
}

async fn episode(State(store): State<Arc<SessionStore>>, Path((id, action)): Path<(String, String)>, body: Bytes) -> Result<Json<Frame>, ApiError> {
    let command: Command = action
        .strip_prefix("episode:")
        .ok_or_else(|| SessionError::UnknownCommand(action.clone()))?
        .parse()?;
    let request: EpisodeRequest = parse_body(&body)?;
    let handle = store.get(&id)?;
    let autoplay = request.autoplay_ms.filter(|_| command == Command::Start);
    let (frame, generation) = with_session(handle.clone(), move |s| {
        let frame = s.control(command, &request)?;
        Ok((frame, s.generation()))
    })
    .await?;
    if let Some(ms) = autoplay {
        spawn_autoplay(handle, generation, Duration::from_millis(ms.max(1)));
    }
    Ok(Json(frame))
}

fn spawn_autoplay(handle: SessionHandle, generation: u64, interval: Duration) {
    tokio::spawn(async move {
        loop {
            tokio::time::sleep(interval).await;
            match with_session(handle.clone(), move |s| s.autoplay_tick(generation)).await {
                Ok(true) => {}
                Ok(false) => break,
                Err(ApiError(e)) => {
                    log::warn!("autoplay stopped: {e}");
                    break;
                }
            }
        }
    });
}

/// Newline-delimited frames: the current status first, then one line per event.
async fn stream_frames(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = store.get(&id)?;
    let (first, rx) = {
        let mut s = handle.write().await;
        (s.current_frame(), s.subscribe())
    };
    let rest = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(frame) => return Some((frame, rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("stream reader skipped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let lines = stream::once(async { first }).chain(rest).map(|frame| {
        let mut line = serde_json::to_vec(&frame).expect("frames serialize");
        line.push(b'\n');
        Ok::<_, Infallible>(Bytes::from(line))
    });
    Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(lines)).into_response())
}

pub async fn serve(store: Arc<SessionStore>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
