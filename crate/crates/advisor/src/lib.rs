//! HTTP service that walks a person through revealing features one at a time.
//!
//! After every value the service answers with the policy's next suggestion,
//! the current cluster ranking, the predicted cluster and the nearest
//! training rows. All numbers come straight from the `frugalnn` library.

mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use session::{
    feature_info, Advice, Event, FeatureInfo, HistoryEntry, ModelBundle, Neighbor, Policy, PredictedCluster, Session,
    Suggestion,
};

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub model: String,
    pub budget: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevealRequest {
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub model: String,
    pub policy: String,
    pub features: Vec<FeatureInfo>,
    #[serde(flatten)]
    pub advice: Advice,
    pub history: Vec<HistoryEntry>,
}

type Shared<T> = Arc<Mutex<T>>;

struct Inner {
    models: HashMap<String, Arc<ModelBundle>>,
    sessions: Mutex<HashMap<String, Shared<Session>>>,
    ttl: Duration,
}

/// Loaded models and live sessions. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(models: HashMap<String, ModelBundle>, ttl: Duration) -> Self {
        let models = models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        Self { inner: Arc::new(Inner { models, sessions: Mutex::new(HashMap::new()), ttl }) }
    }

    pub fn model_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.inner.models.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn model(&self, name: &str) -> Option<Arc<ModelBundle>> {
        self.inner.models.get(name).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session map poisoned").len()
    }

    fn evict_expired(&self, now: Instant) {
        let ttl = self.inner.ttl;
        self.inner
            .sessions
            .lock()
            .expect("session map poisoned")
            .retain(|_, s| now.duration_since(s.lock().expect("session poisoned").last_access) < ttl);
    }

    fn session(&self, id: &str) -> Result<(Shared<Session>, Arc<ModelBundle>), ApiError> {
        self.evict_expired(Instant::now());
        let session = self
            .inner
            .sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id:?}")))?;
        let model = session.lock().expect("session poisoned").model.clone();
        let bundle = self.model(&model).expect("sessions only reference loaded models");
        Ok((session, bundle))
    }
}

fn view(session: &Session, bundle: &ModelBundle) -> SessionView {
    SessionView {
        id: session.id.clone(),
        model: session.model.clone(),
        policy: bundle.policy.kind().to_owned(),
        features: feature_info(bundle),
        advice: session.advice(bundle),
        history: session.history().to_vec(),
    }
}

async fn list_models(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.model_names())
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let bundle = state
        .model(&req.model)
        .ok_or_else(|| ApiError::not_found("unknown_model", format!("no model named {:?}", req.model)))?;
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::new(id.clone(), req.model, &bundle, req.budget)?;
    let body = view(&session, &bundle);
    state.evict_expired(Instant::now());
    state.inner.sessions.lock().expect("session map poisoned").insert(id.clone(), Arc::new(Mutex::new(session)));
    tracing::info!(session = %id, budget = req.budget, "session created");
    Ok((StatusCode::CREATED, Json(body)))
}

/// Runs `f` on the session with its lock held and returns the fresh view.
fn with_session(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session, &ModelBundle) -> Result<(), ApiError>,
) -> Result<Json<SessionView>, ApiError> {
    let (session, bundle) = state.session(id)?;
    let mut session = session.lock().expect("session poisoned");
    session.last_access = Instant::now();
    f(&mut session, &bundle)?;
    Ok(Json(view(&session, &bundle)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    with_session(&state, &id, |_, _| Ok(()))
}

async fn reveal(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<RevealRequest>,
) -> Result<Json<SessionView>, ApiError> {
    with_session(&state, &id, |s, bundle| s.reveal(bundle, &req.feature, req.value))
}

async fn terminate(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    with_session(&state, &id, |s, _| s.terminate())
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state
        .inner
        .sessions
        .lock()
        .expect("session map poisoned")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id:?}")))
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session).delete(delete_session))
        .route("/sessions/:id/reveal", post(reveal))
        .route("/sessions/:id/terminate", post(terminate))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, state: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, models = ?state.model_names(), "advisor listening");
    axum::serve(listener, router(state, ui_dir)).await
}
