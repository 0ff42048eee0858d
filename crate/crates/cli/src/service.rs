//! HTTP/JSON session service.
//!
//! | route | |
//! |---|---|
//! | `GET /datasets` | registered dataset names and sizes |
//! | `POST /sessions` | `{dataset, strategy?, config?, classes?}` → 201 with the first query |
//! | `GET /sessions` | all sessions |
//! | `GET /sessions/{id}/next` | pending query; 409 once the session is over |
//! | `POST /sessions/{id}/label` | `{point_id, label}`; 409 for a stale id, 400 for an unknown class |
//! | `POST /sessions/{id}/abort` | `{reason?}` |
//! | `GET /sessions/{id}/summary` | trace, SDR, discoveries and the φ̂ snapshot |
//! | `GET /sessions/{id}/trace` | trace as step JSONL |
//!
//! Errors are `{"error": message, "fields": {name: problem}}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use uufind::search::Estimator;
use uufind::{SearchConfig, Strategy, TestSet};

use crate::session::{QueryView, Session, SessionError, SessionInfo, Status};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub dataset: String,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub config: SearchConfig,
    /// Classes a labeler may answer beyond the observed predicted classes.
    #[serde(default)]
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub point_id: String,
    pub label: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortRequest {
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub status: Status,
    pub config: SearchConfig,
    pub pending: Option<QueryView>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    fields: BTreeMap<String, String>,
}

impl IntoResponse for SessionError {
    fn into_response(self) -> Response {
        let status = match &self {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            SessionError::Core(uufind::Error::NotPending { .. }) => StatusCode::CONFLICT,
            SessionError::Core(uufind::Error::Config(_)) => StatusCode::BAD_REQUEST,
            SessionError::Core(_) | SessionError::Log { .. } | SessionError::Io(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        let message = self.to_string();
        let fields = match self {
            SessionError::BadRequest { fields, .. } => fields,
            _ => BTreeMap::new(),
        };
        (status, Json(ErrorBody { error: message, fields })).into_response()
    }
}

/// Registered datasets and live sessions.
pub struct AppState {
    datasets: BTreeMap<String, Arc<TestSet>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    log_dir: Option<PathBuf>,
}

impl AppState {
    /// Serves `datasets`. With `log_dir`, sessions are persisted there and
    /// every existing log in it is replayed.
    pub fn new(
        datasets: BTreeMap<String, Arc<TestSet>>,
        log_dir: Option<PathBuf>,
    ) -> Result<Self, SessionError> {
        let mut sessions = BTreeMap::new();
        if let Some(dir) = &log_dir {
            std::fs::create_dir_all(dir)?;
            for path in session_logs(dir)? {
                let session = Session::replay(&path, &datasets)?;
                log::info!("replayed session {} from {}", session.id(), path.display());
                sessions.insert(session.id().to_string(), Arc::new(Mutex::new(session)));
            }
        }
        Ok(Self {
            datasets,
            sessions: RwLock::new(sessions),
            log_dir,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("unknown session `{id}`")))
    }

    pub fn create(&self, req: CreateRequest) -> Result<CreateResponse, SessionError> {
        let ts = self
            .datasets
            .get(&req.dataset)
            .ok_or_else(|| SessionError::NotFound(format!("unknown dataset `{}`", req.dataset)))?;
        let strategy = req.strategy.unwrap_or(Strategy::FacilityLocations);
        let fields = config_problems(strategy, &req.config, ts.len());
        if !fields.is_empty() {
            return Err(SessionError::BadRequest {
                message: "invalid session configuration".into(),
                fields,
            });
        }
        let id = uuid::Uuid::new_v4().to_string();
        let session = Session::create(
            id.clone(),
            req.dataset.clone(),
            Arc::clone(ts),
            strategy,
            req.config.clone(),
            req.classes,
            self.log_dir.as_deref(),
        )
        .map_err(|e| match e {
            SessionError::Core(uufind::Error::Config(m)) => SessionError::bad_request(m),
            other => other,
        })?;
        let response = CreateResponse {
            session_id: id.clone(),
            dataset: req.dataset,
            strategy,
            status: session.status(),
            config: req.config,
            pending: session.next().ok(),
        };
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(response)
    }

    pub fn list(&self) -> Vec<SessionInfo> {
        let table = self.sessions.read().expect("session table poisoned");
        table
            .values()
            .map(|s| s.lock().expect("session poisoned").info())
            .collect()
    }

    pub fn datasets(&self) -> Vec<DatasetInfo> {
        self.datasets
            .iter()
            .map(|(name, ts)| DatasetInfo {
                name: name.clone(),
                n: ts.len(),
                p: ts.dim(),
                classes: ts.predicted_classes().into_iter().collect(),
            })
            .collect()
    }

    pub fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, SessionError>,
    ) -> Result<T, SessionError> {
        let session = self.session(id)?;
        let mut guard = session.lock().expect("session poisoned");
        f(&mut guard)
    }
}

fn session_logs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Field-level configuration problems for a test set of `n` points.
pub fn config_problems(strategy: Strategy, cfg: &SearchConfig, n: usize) -> BTreeMap<String, String> {
    let mut fields = BTreeMap::new();
    if cfg.budget == 0 {
        fields.insert("budget".into(), "must be at least 1".into());
    } else if cfg.budget > n {
        fields.insert("budget".into(), format!("exceeds the {n} points in the dataset"));
    }
    if !(0.0..=1.0).contains(&cfg.tau) {
        fields.insert("tau".into(), "must lie in [0, 1]".into());
    }
    let uses_clusters = strategy == Strategy::Bandit
        || cfg.estimator.unwrap_or(strategy.default_estimator()) == Estimator::Cluster;
    if cfg.clusters == 0 || (uses_clusters && cfg.clusters > n) {
        fields.insert("clusters".into(), format!("must lie in 1..={n}"));
    }
    if !(cfg.exploration.is_finite() && cfg.exploration >= 0.0) {
        fields.insert("exploration".into(), "must be finite and non-negative".into());
    }
    fields
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, SessionError> {
    serde_json::from_slice(body).map_err(|e| SessionError::bad_request(format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", get(list_datasets))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/next", get(next_query))
        .route("/sessions/{id}/label", post(submit_label))
        .route("/sessions/{id}/abort", post(abort_session))
        .route("/sessions/{id}/summary", get(summary))
        .route("/sessions/{id}/trace", get(trace_jsonl))
        .with_state(state)
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<Vec<DatasetInfo>> {
    Json(state.datasets())
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<CreateResponse>), SessionError> {
    let req: CreateRequest = parse(&body)?;
    Ok((StatusCode::CREATED, Json(state.create(req)?)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionInfo>> {
    Json(state.list())
}

async fn next_query(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, SessionError> {
    state.with_session(&id, |s| Ok(Json(s.next()?).into_response()))
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, SessionError> {
    let session = state.session(&id)?;
    let req: LabelRequest = parse(&body)?;
    let mut guard = session.lock().expect("session poisoned");
    Ok(Json(guard.label(&req.point_id, &req.label)?).into_response())
}

async fn abort_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, SessionError> {
    let session = state.session(&id)?;
    let req: AbortRequest = if body.is_empty() { AbortRequest::default() } else { parse(&body)? };
    let mut guard = session.lock().expect("session poisoned");
    guard.abort(req.reason.unwrap_or_else(|| "aborted by labeler".into()))?;
    Ok(Json(guard.info()).into_response())
}

async fn summary(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, SessionError> {
    state.with_session(&id, |s| Ok(Json(s.summary()).into_response()))
}

async fn trace_jsonl(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, SessionError> {
    state.with_session(&id, |s| {
        let mut out = Vec::new();
        s.trace().write_jsonl(&mut out)?;
        Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
    })
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
