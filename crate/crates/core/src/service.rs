//! HTTP session service for live human labeling.
//!
//! Each session runs the same round loop as a simulated experiment, but the
//! annotator is a person working through one item at a time. Every session
//! writes an append-only event log; since selection and training are
//! deterministic given the config, replaying the log rebuilds the session
//! exactly.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::{Mutex, RwLock};

use crate::annotate::{labeling_cost, ratio_stats, TimingRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::orchestrator::{self, ExperimentConfig, Method, RoundRecord, RoundSelection, RunState, Tiers};
use crate::tier_select::SelectedItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selecting,
    AwaitingLabels,
    Training,
    Done,
}

/// A human label together with both elapsed-time measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveRecord {
    pub item_token: String,
    pub round: usize,
    /// `elapsed` is the server-side time between serving and submission.
    pub record: TimingRecord,
    pub client_elapsed_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created {
        session_id: String,
        config: Box<ExperimentConfig>,
    },
    Label {
        item_token: String,
        item_index: usize,
        final_label: usize,
        client_elapsed_ms: u64,
        server_elapsed_ms: u64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Core(Error::InsufficientData(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Core(
                Error::InvalidArgument(_) | Error::Validation(_) | Error::Format { .. } | Error::Serde(_),
            ) => StatusCode::BAD_REQUEST,
            ApiError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn item_token(session_id: &str, round: usize, position: usize, item: usize) -> String {
    let digest = Sha256::digest(format!("{session_id}/{round}/{position}/{item}").as_bytes());
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Synchronous session state machine. The async layer only adds locking and
/// moves selection and training off the request path.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub cfg: ExperimentConfig,
    ds: Arc<Dataset>,
    phase: Phase,
    state: Option<RunState>,
    selection: RoundSelection,
    /// Position of the next item in `selection.annotated()`.
    cursor: usize,
    served_at: Option<Instant>,
    round_annotations: Vec<TimingRecord>,
    records: Vec<LiveRecord>,
    history: Vec<RoundRecord>,
    log_path: Option<PathBuf>,
    failure: Option<String>,
}

impl Session {
    fn new(id: String, cfg: ExperimentConfig, ds: Arc<Dataset>, log_path: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        if cfg.method == Method::AlPlain {
            return Err(Error::invalid(
                "live sessions always show a suggestion; use clarifier or al_suggest",
            ));
        }
        Ok(Session {
            id,
            cfg,
            ds,
            phase: Phase::Selecting,
            state: None,
            selection: RoundSelection::default(),
            cursor: 0,
            served_at: None,
            round_annotations: Vec::new(),
            records: Vec::new(),
            history: Vec::new(),
            log_path,
            failure: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn records(&self) -> &[LiveRecord] {
        &self.records
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    fn pending(&self) -> Option<&SelectedItem> {
        if self.phase != Phase::AwaitingLabels {
            return None;
        }
        self.selection.annotated().nth(self.cursor)
    }

    fn pending_token(&self) -> Option<String> {
        let round = self.state.as_ref()?.round + 1;
        self.pending()
            .map(|it| item_token(&self.id, round, self.cursor, it.index))
    }

    fn append(&self, ev: &Event) -> Result<()> {
        let Some(path) = &self.log_path else {
            return Ok(());
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut line = serde_json::to_vec(ev)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(path, e))?;
        f.sync_data().map_err(|e| Error::io(path, e))
    }

    /// Work for the current phase: round-0 preparation plus selection while
    /// selecting, or retraining plus the next selection while training.
    /// Pure with respect to `self`, so it can run without the session lock.
    fn compute(&self) -> Result<Advance> {
        let (state, record) = match (&self.state, self.phase) {
            (None, _) => orchestrator::prepare_run(&self.cfg, &self.ds, 0)?,
            (Some(st), Phase::Training) => {
                let mut st = st.clone();
                let rec =
                    orchestrator::apply_round(&mut st, &self.ds, &self.cfg, &self.selection, &self.round_annotations)?;
                (st, rec)
            }
            (Some(_), phase) => return Err(Error::invalid(format!("nothing to compute in phase {phase:?}"))),
        };
        let selection = if state.round >= self.cfg.rounds {
            None
        } else {
            match orchestrator::select_round(&state, &self.ds, &self.cfg) {
                Ok(sel) => Some(sel),
                Err(Error::BudgetExhausted { requested, available }) => {
                    log::warn!(
                        "session {}: budget {requested} exceeds {available} unlabeled items",
                        self.id
                    );
                    None
                }
                Err(e) => return Err(e),
            }
        };
        Ok(Advance {
            state,
            record,
            selection,
        })
    }

    fn install(&mut self, adv: Advance) {
        self.state = Some(adv.state);
        self.history.push(adv.record);
        self.round_annotations.clear();
        self.cursor = 0;
        self.served_at = None;
        match adv.selection {
            None => {
                self.selection = RoundSelection::default();
                self.phase = Phase::Done;
            }
            Some(sel) => {
                let nothing_to_label = sel.annotated().next().is_none();
                self.selection = sel;
                self.phase = if nothing_to_label {
                    Phase::Training
                } else {
                    Phase::AwaitingLabels
                };
            }
        }
    }

    fn fail(&mut self, e: Error) {
        log::error!("session {}: {e}", self.id);
        self.failure = Some(e.to_string());
        self.phase = Phase::Done;
    }

    /// Runs compute/install until the session waits on a human or is done.
    fn settle(&mut self) {
        while matches!(self.phase, Phase::Selecting | Phase::Training) {
            match self.compute() {
                Ok(adv) => self.install(adv),
                Err(e) => self.fail(e),
            }
        }
    }

    fn serve(&mut self) -> Option<NextItem> {
        let token = self.pending_token()?;
        let it = self.pending()?.clone();
        if self.served_at.is_none() {
            self.served_at = Some(Instant::now());
        }
        Some(NextItem {
            item_token: token,
            item_index: it.index,
            features: self.ds.row(it.index).to_vec(),
            thumbnail: self
                .ds
                .thumbnails
                .as_ref()
                .and_then(|t| t.get(it.index))
                .filter(|s| !s.is_empty())
                .cloned(),
            suggested_label: it.suggested_label,
            class_names: self.ds.class_names.clone(),
            tier: it.tier.as_str().to_owned(),
        })
    }

    /// Accepts a label for the pending item. Returns `false` for an
    /// idempotent replay of an already accepted token.
    fn submit(
        &mut self,
        token: &str,
        final_label: usize,
        client_elapsed_ms: u64,
        server_elapsed_ms: Option<u64>,
    ) -> ApiResult<bool> {
        if self.records.iter().any(|r| r.item_token == token) {
            return Ok(false);
        }
        if self.phase != Phase::AwaitingLabels {
            return Err(ApiError::Conflict(format!(
                "labels are not accepted in phase {}",
                phase_name(self.phase)
            )));
        }
        if self.pending_token().as_deref() != Some(token) {
            return Err(ApiError::Conflict("item token is not the pending item".into()));
        }
        if final_label >= self.ds.num_classes() {
            return Err(Error::invalid(format!(
                "final_label {final_label} out of range for {} classes",
                self.ds.num_classes()
            ))
            .into());
        }
        let it = self.pending().expect("pending token implies pending item").clone();
        let server_ms =
            server_elapsed_ms.unwrap_or_else(|| self.served_at.map(|t| t.elapsed().as_millis() as u64).unwrap_or(0));
        let round = self.state.as_ref().map_or(0, |s| s.round + 1);
        self.append(&Event::Label {
            item_token: token.to_owned(),
            item_index: it.index,
            final_label,
            client_elapsed_ms,
            server_elapsed_ms: server_ms,
        })?;
        let record = TimingRecord {
            item: it.index,
            // the person kept the suggestion, so they only had to verify it
            suggestion_correct: final_label == it.suggested_label,
            final_label,
            elapsed: server_ms as f64 / 1000.0,
            discarded: final_label != self.ds.label(it.index),
        };
        self.round_annotations.push(record.clone());
        self.records.push(LiveRecord {
            item_token: token.to_owned(),
            round,
            record,
            client_elapsed_ms,
        });
        self.cursor += 1;
        self.served_at = None;
        if self.pending().is_none() {
            self.phase = Phase::Training;
        }
        Ok(true)
    }

    pub fn metrics(&self) -> Metrics {
        let last = self.history.last();
        let plain: Vec<TimingRecord> = self.records.iter().map(|r| r.record.clone()).collect();
        Metrics {
            round: last.map_or(0, |r| r.round),
            test_accuracy: last.map(|r| r.test_accuracy),
            cost_cumulative: labeling_cost(&plain, self.cfg.c_a, self.cfg.c_v),
            tiers: last.map(|r| r.tiers).unwrap_or_default(),
        }
    }

    fn replay(path: &Path, ds_cache: &mut HashMap<String, Arc<Dataset>>) -> Result<Session> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut session: Option<Session> = None;
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: Event = serde_json::from_str(&line).map_err(|e| Error::Format {
                offset: lineno as u64,
                message: format!("{}: bad event: {e}", path.display()),
            })?;
            match (ev, session.as_mut()) {
                (Event::Created { session_id, config }, None) => {
                    let ds = load_cached(&config, ds_cache)?;
                    let mut s = Session::new(session_id, *config, ds, None)?;
                    s.settle();
                    session = Some(s);
                }
                (
                    Event::Label {
                        item_token,
                        final_label,
                        client_elapsed_ms,
                        server_elapsed_ms,
                        ..
                    },
                    Some(s),
                ) => {
                    s.submit(&item_token, final_label, client_elapsed_ms, Some(server_elapsed_ms))
                        .map_err(|e| {
                            Error::Validation(format!("{}: replay line {}: {e}", path.display(), lineno + 1))
                        })?;
                    s.settle();
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "{}: line {} is out of order",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        let mut s = session.ok_or_else(|| Error::Validation(format!("{}: empty event log", path.display())))?;
        s.log_path = Some(path.to_owned());
        Ok(s)
    }
}

struct Advance {
    state: RunState,
    record: RoundRecord,
    selection: Option<RoundSelection>,
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Selecting => "selecting",
        Phase::AwaitingLabels => "awaiting_labels",
        Phase::Training => "training",
        Phase::Done => "done",
    }
}

fn load_cached(cfg: &ExperimentConfig, cache: &mut HashMap<String, Arc<Dataset>>) -> Result<Arc<Dataset>> {
    let key = serde_json::to_string(&cfg.dataset)?;
    if let Some(ds) = cache.get(&key) {
        return Ok(ds.clone());
    }
    let ds = Arc::new(cfg.dataset.load()?);
    cache.insert(key, ds.clone());
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub item_token: String,
    pub item_index: usize,
    pub features: Vec<f32>,
    pub thumbnail: Option<String>,
    pub suggested_label: usize,
    pub class_names: Vec<String>,
    pub tier: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub round: usize,
    pub test_accuracy: Option<f64>,
    pub cost_cumulative: f64,
    pub tiers: Tiers,
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub item_token: String,
    pub final_label: usize,
    #[serde(default)]
    pub client_elapsed_ms: u64,
}

type Shared = Arc<Mutex<Session>>;

/// Session registry shared by all handlers.
#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Shared>>>,
    datasets: Arc<std::sync::Mutex<HashMap<String, Arc<Dataset>>>>,
    out_dir: Option<PathBuf>,
}

impl AppState {
    /// Opens the registry, replaying every session found under
    /// `out_dir/sessions`.
    pub fn open(out_dir: Option<PathBuf>) -> Result<Self> {
        let mut sessions = HashMap::new();
        let mut cache = HashMap::new();
        if let Some(dir) = &out_dir {
            let root = dir.join("sessions");
            fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            let mut entries: Vec<PathBuf> = fs::read_dir(&root)
                .map_err(|e| Error::io(&root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for entry in entries {
                let log = entry.join("events.jsonl");
                if !log.is_file() {
                    continue;
                }
                let s = Session::replay(&log, &mut cache)?;
                log::info!("resumed session {} in phase {}", s.id, phase_name(s.phase));
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(AppState {
            sessions: Arc::new(RwLock::new(sessions)),
            datasets: Arc::new(std::sync::Mutex::new(cache)),
            out_dir,
        })
    }

    async fn get(&self, id: &str) -> ApiResult<Shared> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_owned()))
    }

    pub async fn phase(&self, id: &str) -> Option<Phase> {
        let s = self.sessions.read().await.get(id).cloned()?;
        let phase = s.lock().await.phase;
        Some(phase)
    }
}

/// Drives selection/training off the request path until the session waits
/// for labels or is done. The lock is released while computing; the phase
/// keeps submissions out in the meantime.
fn spawn_advance(session: Shared) {
    tokio::spawn(async move {
        loop {
            let snapshot = {
                let s = session.lock().await;
                if !matches!(s.phase, Phase::Selecting | Phase::Training) {
                    return;
                }
                s.clone()
            };
            let out = tokio::task::spawn_blocking(move || snapshot.compute()).await;
            let mut s = session.lock().await;
            match out {
                Ok(Ok(adv)) => s.install(adv),
                Ok(Err(e)) => s.fail(e),
                Err(join) => s.fail(Error::Validation(format!("background task failed: {join}"))),
            }
        }
    });
}

async fn create(State(app): State<AppState>, Json(req): Json<CreateRequest>) -> ApiResult<Json<serde_json::Value>> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let cfg = req.config;
    let cache = app.datasets.clone();
    let cfg_for_load = cfg.clone();
    let ds = tokio::task::spawn_blocking(move || {
        let mut guard = cache.lock().expect("dataset cache poisoned");
        load_cached(&cfg_for_load, &mut guard)
    })
    .await
    .map_err(|e| Error::Validation(format!("dataset load task failed: {e}")))??;

    let log_path = match &app.out_dir {
        Some(dir) => {
            let d = dir.join("sessions").join(&id);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            Some(d.join("events.jsonl"))
        }
        None => None,
    };
    let session = Session::new(id.clone(), cfg.clone(), ds, log_path)?;
    session.append(&Event::Created {
        session_id: id.clone(),
        config: Box::new(cfg),
    })?;
    let shared = Arc::new(Mutex::new(session));
    app.sessions.write().await.insert(id.clone(), shared.clone());
    spawn_advance(shared);
    Ok(Json(json!({ "session_id": id })))
}

async fn status(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = app.get(&id).await?;
    let s = s.lock().await;
    Ok(Json(json!({
        "session_id": s.id,
        "phase": s.phase,
        "round": s.history.last().map_or(0, |r| r.round),
        "records": s.records.len(),
        "error": s.failure,
    })))
}

async fn next(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = app.get(&id).await?;
    let mut s = s.lock().await;
    Ok(match s.serve() {
        Some(item) => Json(item).into_response(),
        None => Json(json!({ "phase": s.phase })).into_response(),
    })
}

async fn labels(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<LabelRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    let shared = app.get(&id).await?;
    let needs_training = {
        let mut s = shared.lock().await;
        s.submit(&req.item_token, req.final_label, req.client_elapsed_ms, None)?;
        s.phase == Phase::Training
    };
    if needs_training {
        spawn_advance(shared);
    }
    Ok(Json(json!({ "accepted": true })))
}

async fn metrics(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Metrics>> {
    let s = app.get(&id).await?;
    let s = s.lock().await;
    Ok(Json(s.metrics()))
}

async fn ratios(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = app.get(&id).await?;
    let s = s.lock().await;
    let plain: Vec<TimingRecord> = s.records.iter().map(|r| r.record.clone()).collect();
    Ok(Json(ratio_stats(&plain)?).into_response())
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(status))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/labels", post(labels))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/stats/ratios", get(ratios))
        .with_state(app)
}

/// Resumes any persisted sessions, then serves until ctrl-c.
pub async fn serve(bind: &str, out_dir: Option<PathBuf>) -> Result<()> {
    let app = tokio::task::spawn_blocking(move || AppState::open(out_dir))
        .await
        .map_err(|e| Error::Validation(format!("startup task failed: {e}")))??;
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::io(bind, e))?;
    log::info!(
        "listening on {}",
        listener.local_addr().map_err(|e| Error::io(bind, e))?
    );
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(bind, e))
}
