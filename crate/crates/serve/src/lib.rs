//! HTTP session service that drives active learning with a human annotator.

pub mod api;
pub mod session;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dtal_core::checkpoint;
use dtal_core::data::PreparedDataset;
use dtal_core::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
use dtal_core::model::ErModel;
use dtal_core::pipeline::encode_dataset;
use log::{info, warn};
use serde::de::DeserializeOwned;
use thiserror::Error;

use api::{
    Advanced, Batch, BatchPair, Created, CreateSession, ErrorBody, Init, LabelSubmission, LabelsAccepted, Metrics,
    MetricsRow, SessionState, Status,
};
use session::{Event, Journal, PairView, Replay, Runner, Session, TrainingGate};

#[derive(Debug, Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub missing: Option<Vec<usize>>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            missing: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            missing: self.missing,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, Default)]
pub struct ServeConfig {
    /// Directory holding prepared datasets, one subdirectory each.
    pub data_root: PathBuf,
    /// Where session journals are written; none disables journaling.
    pub journal_dir: Option<PathBuf>,
    /// Required bearer token, if any.
    pub token: Option<String>,
    /// Pretrained vectors used for randomly initialized models of the same
    /// dimension and for checkpoints built on them.
    pub embeddings: Option<Arc<EmbeddingStore>>,
}

#[derive(Clone, Debug)]
pub struct AppState {
    inner: Arc<Shared>,
}

#[derive(Debug)]
struct Shared {
    config: ServeConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    gate: Arc<TrainingGate>,
}

/// Result of a finished session.
#[derive(Debug)]
pub struct SessionOutcome {
    pub history: Vec<dtal_core::active::IterationLog>,
    pub model: Option<ErModel>,
    pub error: Option<String>,
}

impl AppState {
    pub fn new(config: ServeConfig) -> std::io::Result<Self> {
        if let Some(dir) = &config.journal_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            inner: Arc::new(Shared {
                config,
                sessions: RwLock::new(HashMap::new()),
                gate: Arc::new(TrainingGate::default()),
            }),
        })
    }

    pub fn config(&self) -> &ServeConfig {
        &self.inner.config
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    /// The process-wide training slot, held by whichever session retrains.
    pub fn training_gate(&self) -> Arc<TrainingGate> {
        self.inner.gate.clone()
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn dataset_dir(&self, name: &str) -> ApiResult<PathBuf> {
        let valid = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && name != "."
            && name != "..";
        if !valid {
            return Err(ApiError::bad_request(format!("invalid dataset name `{name}`")));
        }
        let dir = self.config().data_root.join(name);
        if !dir.join(dtal_core::data::META_FILE).is_file() {
            return Err(ApiError::conflict(format!("dataset `{name}` is not prepared")));
        }
        Ok(dir)
    }

    fn init_model(&self, request: &CreateSession) -> ApiResult<ErModel> {
        match &request.init {
            Init::Random => {
                let cfg = request.model.clone().unwrap_or_default();
                cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
                let store = match &self.config().embeddings {
                    Some(s) if s.dim() == cfg.embedding_dim => s.clone(),
                    _ => Arc::new(EmbeddingStore::hashed_only(cfg.embedding_dim, NgramHashConfig::default())),
                };
                ErModel::new(cfg, TokenizerConfig::default(), store).map_err(|e| ApiError::bad_request(e.to_string()))
            }
            Init::Checkpoint(path) => {
                let bad = |e: checkpoint::CheckpointError| ApiError::bad_request(format!("{}: {e}", path.display()));
                let (manifest, _) = checkpoint::read_manifest(path).map_err(bad)?;
                let store = checkpoint::store_for(&manifest, self.config().embeddings.clone());
                Ok(checkpoint::load(path, store, false).map_err(bad)?.0)
            }
        }
    }

    /// Validates the request, builds the model and starts the session loop.
    /// Returns once the first batch is selected (or the loop has stopped).
    pub fn create_session(&self, request: CreateSession) -> ApiResult<String> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.start(id, request, Replay::default(), true)
    }

    fn start(&self, id: String, request: CreateSession, replay: Replay, fresh: bool) -> ApiResult<String> {
        request
            .config
            .validate()
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let dir = self.dataset_dir(&request.dataset)?;
        let ds = PreparedDataset::load(&dir).map_err(|e| ApiError::conflict(e.to_string()))?;
        let mut model = self.init_model(&request)?;
        let data = encode_dataset(&mut model, &ds).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let gold = match (request.attach_gold, &data.train_gold) {
            (false, _) => None,
            (true, Some(g)) => Some(g.clone()),
            (true, None) => {
                return Err(ApiError::bad_request(format!(
                    "dataset `{}` has no train labels to attach",
                    request.dataset
                )))
            }
        };
        let attributes = ds.schema().names().to_vec();
        let pairs = ds
            .train
            .iter()
            .map(|p| {
                let values = |table: &dtal_core::data::EntityTable, rid: &str| {
                    table.get(rid).map(|r| r.values.clone()).unwrap_or_default()
                };
                PairView {
                    left_id: p.left.clone(),
                    right_id: p.right.clone(),
                    left: values(&ds.left, &p.left),
                    right: values(&ds.right, &p.right),
                }
            })
            .collect();
        let journal = match &self.config().journal_dir {
            Some(dir) => {
                let j = Journal::open(&dir.join(format!("{id}.jsonl")))
                    .map_err(|e| ApiError::internal(format!("journal: {e}")))?;
                if fresh {
                    j.append(&Event::Created {
                        session_id: id.clone(),
                        request: request.clone(),
                    })
                    .map_err(|e| ApiError::internal(format!("journal: {e}")))?;
                }
                Some(j)
            }
            None => None,
        };
        let (session, replies) = session::new_session(id.clone(), request, attributes, pairs, gold.is_some(), journal);
        self.inner
            .sessions
            .write()
            .unwrap()
            .insert(id.clone(), session.clone());
        let gate = self.inner.gate.clone();
        let runner = Runner { model, data, gold };
        let s = session.clone();
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || session::run(s, replies, gate, replay, runner))
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let g = session.wait_until(|g| g.done || g.state == SessionState::AwaitingLabels);
        if let (true, Some(e)) = (g.history.is_empty(), &g.error) {
            return Err(ApiError::internal(format!("session {id} failed to start: {e}")));
        }
        drop(g);
        info!("session {id} started on `{}`", session.request.dataset);
        Ok(id)
    }

    /// Restarts every journaled session by replaying its recorded labels.
    /// Sessions whose journal cannot be replayed are skipped with a warning.
    pub fn recover(&self) -> std::io::Result<Vec<String>> {
        let Some(dir) = self.config().journal_dir.clone() else {
            return Ok(Vec::new());
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut out = Vec::new();
        for path in paths {
            match self.recover_one(&path) {
                Ok(id) => out.push(id),
                Err(e) => warn!("{}: not recovered: {e}", path.display()),
            }
        }
        Ok(out)
    }

    fn recover_one(&self, path: &Path) -> Result<String, String> {
        let events = Journal::read(path).map_err(|e| e.to_string())?;
        let (id, request, replay) = Replay::from_events(&events)?;
        if path.file_stem().and_then(|s| s.to_str()) != Some(id.as_str()) {
            return Err(format!("journal names session `{id}`"));
        }
        let id = self.start(id, request, replay, false).map_err(|e| e.message)?;
        info!("session {id} recovered from {}", path.display());
        Ok(id)
    }

    /// Blocks until the session loop stops and takes its final model.
    pub fn wait_finished(&self, id: &str) -> ApiResult<SessionOutcome> {
        let session = self.session(id)?;
        let mut g = session.wait_until(|g| g.done);
        Ok(SessionOutcome {
            history: g.history.clone(),
            model: g.final_model.take(),
            error: g.error.clone(),
        })
    }

    pub fn status(&self, id: &str) -> ApiResult<Status> {
        let s = self.session(id)?;
        let g = s.lock();
        let completed = g.history.len();
        let iteration = match (&g.pending, g.state) {
            (Some(p), _) => p.request.iteration,
            (None, SessionState::Finished) => completed,
            (None, _) => completed + 1,
        };
        Ok(Status {
            session_id: s.id.clone(),
            dataset: s.request.dataset.clone(),
            state: g.state,
            iteration,
            iterations: s.config().iterations,
            completed_iterations: completed,
            pending: g.pending.as_ref().map_or(0, |p| p.request.ids.len()),
            labeled: g.pending.as_ref().map_or(0, |p| p.labels.len()),
            human_labels: g.human_labels,
            error: g.error.clone(),
        })
    }

    pub fn batch(&self, id: &str) -> ApiResult<Batch> {
        let s = self.session(id)?;
        let g = s.lock();
        let pending = match (&g.pending, g.state) {
            (Some(p), SessionState::AwaitingLabels) => p,
            (_, state) => return Err(ApiError::conflict(format!("session is {}", state_name(state)))),
        };
        let named = |values: &[String]| {
            s.attributes
                .iter()
                .cloned()
                .zip(values.iter().cloned())
                .collect()
        };
        let pairs = pending
            .request
            .ids
            .iter()
            .map(|&pid| {
                let view = &s.pairs[pid];
                BatchPair {
                    pair_id: pid,
                    left_id: view.left_id.clone(),
                    right_id: view.right_id.clone(),
                    left: named(&view.left),
                    right: named(&view.right),
                    probability: pending.request.selection.scores[&pid].p,
                    bucket: pending.bucket(pid),
                }
            })
            .collect();
        Ok(Batch {
            session_id: s.id.clone(),
            iteration: pending.request.iteration,
            attributes: s.attributes.clone(),
            pairs,
        })
    }

    /// Records labels for pending picks. All or nothing: any unknown or
    /// repeated pair rejects the whole submission.
    pub fn submit_labels(&self, id: &str, submission: LabelSubmission) -> ApiResult<LabelsAccepted> {
        let s = self.session(id)?;
        let mut g = s.lock();
        let state = g.state;
        let Some(pending) = g.pending.as_mut().filter(|_| state == SessionState::AwaitingLabels) else {
            return Err(ApiError::conflict(format!("session is {}", state_name(state))));
        };
        let unknown: Vec<usize> = submission
            .labels
            .iter()
            .map(|l| l.pair_id)
            .filter(|pid| !pending.request.ids.contains(pid))
            .collect();
        if !unknown.is_empty() {
            let mut e = ApiError::not_found(format!("pairs not in the current batch: {unknown:?}"));
            e.missing = Some(unknown);
            return Err(e);
        }
        let mut seen = std::collections::HashSet::new();
        for l in &submission.labels {
            if !seen.insert(l.pair_id) || pending.labels.contains_key(&l.pair_id) {
                return Err(ApiError::conflict(format!("pair {} is already labeled", l.pair_id)));
            }
        }
        s.journal(&Event::Labels {
            iteration: pending.request.iteration,
            labels: submission.labels.clone(),
        })
        .map_err(|e| ApiError::internal(format!("journal: {e}")))?;
        for l in &submission.labels {
            pending.labels.insert(l.pair_id, l.label.is_match());
        }
        Ok(LabelsAccepted {
            accepted: submission.labels.len(),
            remaining: pending.missing().len(),
        })
    }

    /// Releases the labeled batch to the loop, which retrains in the
    /// background.
    pub fn advance(&self, id: &str) -> ApiResult<Advanced> {
        let s = self.session(id)?;
        let mut g = s.lock();
        let state = g.state;
        let Some(pending) = g.pending.as_ref().filter(|_| state == SessionState::AwaitingLabels) else {
            return Err(ApiError::conflict(format!("session is {}", state_name(state))));
        };
        let missing = pending.missing();
        if !missing.is_empty() {
            let mut e = ApiError::conflict(format!("{} pairs are unlabeled", missing.len()));
            e.missing = Some(missing);
            return Err(e);
        }
        let iteration = pending.request.iteration;
        let labels: Vec<bool> = pending.request.ids.iter().map(|pid| pending.labels[pid]).collect();
        s.journal(&Event::Advanced { iteration })
            .map_err(|e| ApiError::internal(format!("journal: {e}")))?;
        s.send_labels(labels.clone()).map_err(ApiError::conflict)?;
        g.human_labels += labels.len();
        g.pending = None;
        g.state = SessionState::Training;
        drop(g);
        s.notify();
        Ok(Advanced {
            session_id: s.id.clone(),
            iteration,
            state: SessionState::Training,
        })
    }

    pub fn metrics(&self, id: &str) -> ApiResult<Metrics> {
        let s = self.session(id)?;
        let g = s.lock();
        Ok(Metrics {
            session_id: s.id.clone(),
            history: g.history.iter().map(|l| MetricsRow::from_log(l, s.has_gold)).collect(),
        })
    }
}

fn state_name(state: SessionState) -> &'static str {
    match state {
        SessionState::AwaitingLabels => "awaiting-labels",
        SessionState::Training => "training",
        SessionState::Idle => "idle",
        SessionState::Finished => "finished",
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs blocking session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create(State(app): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let request: CreateSession = parse(&body)?;
    let session_id = blocking(move || app.create_session(request)).await?;
    Ok((StatusCode::CREATED, Json(Created { session_id })))
}

async fn batch(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Batch>> {
    app.batch(&id).map(Json)
}

async fn labels(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<LabelsAccepted>> {
    let submission: LabelSubmission = parse(&body)?;
    blocking(move || app.submit_labels(&id, submission)).await.map(Json)
}

async fn advance(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<(StatusCode, Json<Advanced>)> {
    let out = blocking(move || app.advance(&id)).await?;
    Ok((StatusCode::ACCEPTED, Json(out)))
}

async fn status(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Status>> {
    app.status(&id).map(Json)
}

async fn metrics(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Metrics>> {
    app.metrics(&id).map(Json)
}

async fn require_token(State(app): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &app.config().token {
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/batch", get(batch))
        .route("/sessions/{id}/labels", post(labels))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/metrics", get(metrics))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves the API on `listener` until the process exits.
pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
