//! HTTP/JSON front end for active-prompting sessions.
//!
//! Every session lives in memory behind its own lock. Mutations take the lock
//! without waiting and answer `409` when another request holds it; reads
//! queue. A step re-runs the backbone and the posterior ensemble, so it runs on
//! the blocking pool.
//!
//! Each step applies the same stopping rules, in the same order, as
//! [`baldseg::session::run_session`], so a simulated session driven over HTTP
//! logs byte-for-byte what the in-process loop logs.

pub mod api;
mod error;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use baldseg::acquisition::StrategyKind;
use baldseg::backbone::{PromptableSegmenter, ToyBackbone};
use baldseg::domain::{BinaryMask, Image, Label, Pixel};
use baldseg::head::LaplacePosterior;
use baldseg::io::{heatmap_png, image_png, load_posterior, mask_png, Dataset, ScoreGrid};
use baldseg::session::{Engine, ReplayLog, Session, StopConfig, StopReason, Strategy};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::sync::RwLock as AsyncRwLock;

pub use api::Mode;
pub use error::{ApiError, ApiResult};

use api::{
    Created, CreateSession, DatasetInfo, ItemInfo, LabelRequest, Labelled, SessionSummary, Stopped, Suggestion,
};

/// Posterior id used when a request names none.
pub const DEFAULT_POSTERIOR: &str = "default";

/// Shared server state.
pub struct AppState {
    backbone: Arc<dyn PromptableSegmenter>,
    posteriors: BTreeMap<String, Arc<LaplacePosterior>>,
    dataset: Option<Dataset>,
    samples_k: usize,
    log_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    pub fn new(backbone: Arc<dyn PromptableSegmenter>, dataset: Option<Dataset>, samples_k: usize) -> Self {
        AppState {
            backbone,
            posteriors: BTreeMap::new(),
            dataset,
            samples_k,
            log_dir: None,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Toy backbone, the dataset at `data_dir`, and the posterior at
    /// `posterior_path` registered as `default` and under its file stem.
    pub fn from_paths(data_dir: &Path, posterior_path: &Path, samples_k: usize) -> baldseg::Result<Self> {
        let dataset = Dataset::open(data_dir)?;
        let posterior = Arc::new(load_posterior(posterior_path)?);
        let mut state = AppState::new(Arc::new(ToyBackbone::default()), Some(dataset), samples_k);
        if let Some(stem) = posterior_path.file_stem().and_then(|s| s.to_str()) {
            state = state.with_posterior(stem, Arc::clone(&posterior));
        }
        Ok(state.with_posterior(DEFAULT_POSTERIOR, posterior))
    }

    pub fn with_posterior(mut self, id: &str, posterior: Arc<LaplacePosterior>) -> Self {
        self.posteriors.insert(id.to_string(), posterior);
        self
    }

    /// Stopped sessions are written to `dir/{session_id}.jsonl`; stopped human
    /// sessions on dataset items also to `dir/replay/{item_id}.jsonl`, the
    /// layout the `human_replay` benchmark strategy reads.
    pub fn with_log_dir(mut self, dir: PathBuf) -> Self {
        self.log_dir = Some(dir);
        self
    }

    fn handle(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    fn persist(&self, handle: &SessionHandle, session: &Session) -> ApiResult<()> {
        let Some(dir) = &self.log_dir else { return Ok(()) };
        let text = session.trajectory().to_jsonl();
        let write = |path: PathBuf| -> std::io::Result<()> {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, &text)
        };
        write(dir.join(format!("{}.jsonl", handle.id))).map_err(|e| ApiError::internal(e.to_string()))?;
        if let (Mode::Human, Some(item)) = (handle.mode, &handle.item_id) {
            write(dir.join("replay").join(format!("{item}.jsonl"))).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        Ok(())
    }
}

/// One live session and what it was created with.
pub struct SessionHandle {
    pub id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub mode: Mode,
    pub strategy: StrategyKind,
    pub item_id: Option<String>,
    pub stop_config: StopConfig,
    session: Arc<AsyncRwLock<Session>>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/suggestion", get(get_suggestion))
        .route("/sessions/{id}/label", post(post_label))
        .route("/sessions/{id}/stop", post(stop_session))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .route("/sessions/{id}/heatmap.png", get(get_heatmap))
        .route("/sessions/{id}/scores", get(get_scores))
        .route("/sessions/{id}/image.png", get(get_image))
        .route("/sessions/{id}/mask.png", get(get_mask))
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/items", get(list_items))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn suggestion_of(id: &str, session: &Session) -> Option<Suggestion> {
    session.suggestion().map(|q| Suggestion {
        q,
        max_mi: session.max_mi(),
        h_total: session.h_total(),
        heatmap_url: format!("/sessions/{id}/heatmap.png?t={}", session.iteration()),
    })
}

/// Applies the stopping rules the way the in-process loop does before each step.
fn settle(session: &mut Session, config: &StopConfig) -> baldseg::Result<Option<StopReason>> {
    if let Some(r) = session.stop_reason() {
        return Ok(Some(r));
    }
    let reason = session
        .check_stop(config)
        .or_else(|| session.suggestion().is_none().then_some(StopReason::CandidatesExhausted));
    if let Some(r) = reason {
        session.stop(r)?;
    }
    Ok(reason)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    let kind: StrategyKind = req.strategy.parse().map_err(|_| {
        ApiError::bad_request(format!("unknown strategy {:?}", req.strategy))
    })?;
    let posterior = state
        .posteriors
        .get(&req.posterior_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no posterior {}", req.posterior_id)))?;
    let (image, gt): (Image, Option<BinaryMask>) = match (&req.item_id, &req.image) {
        (Some(id), None) => {
            let dataset = state.dataset.as_ref().ok_or_else(|| ApiError::not_found("no dataset is loaded"))?;
            let item = dataset.item(id).ok_or_else(|| ApiError::not_found(format!("no dataset item {id}")))?;
            let scene = dataset.load(item)?;
            (scene.image, Some(scene.gt))
        }
        (None, Some(inline)) => (inline.to_image()?, req.ground_truth.as_ref().map(|m| m.to_mask()).transpose()?),
        _ => return Err(ApiError::bad_request("give exactly one of item_id and image")),
    };
    if req.mode == Mode::Simulated && gt.is_none() {
        return Err(ApiError::bad_request("simulated sessions need a ground-truth mask"));
    }
    let strategy = match kind {
        StrategyKind::HumanReplay => {
            let text = req.replay_log.as_deref().ok_or_else(|| ApiError::bad_request("human_replay needs replay_log"))?;
            Strategy::HumanReplay(ReplayLog::from_jsonl(text)?)
        }
        other => Strategy::simple(other)?,
    };
    let stop_config = req.stop_config.resolve();
    stop_config.validate()?;
    let engine = Engine { backbone: Arc::clone(&state.backbone), posterior, samples_k: state.samples_k };
    let seed = req.seed;
    let mut session = blocking(move || Ok(Session::new(image, gt, strategy, &engine, seed)?)).await?;
    let id = uuid::Uuid::new_v4().to_string();
    let stop_reason = settle(&mut session, &stop_config)?;
    let created = Created {
        session_id: id.clone(),
        initial_mask_digest: session.current_mask().sha256(),
        suggestion: suggestion_of(&id, &session),
        stop_reason,
    };
    let handle = Arc::new(SessionHandle {
        id: id.clone(),
        created_at: unix_now(),
        mode: req.mode,
        strategy: kind,
        item_id: req.item_id.clone(),
        stop_config,
        session: Arc::new(AsyncRwLock::new(session)),
    });
    if stop_reason.is_some() {
        state.persist(&handle, &*handle.session.read().await)?;
    }
    state.sessions.write().expect("session table poisoned").insert(id, handle);
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn session_summary(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    Ok(Json(SessionSummary {
        session_id: handle.id.clone(),
        created_at: handle.created_at,
        mode: handle.mode,
        strategy: handle.strategy.name().to_string(),
        item_id: handle.item_id.clone(),
        height: session.image().height(),
        width: session.image().width(),
        has_ground_truth: session.ground_truth().is_some(),
        iteration: session.iteration(),
        stop_reason: session.stop_reason(),
        stop_config: handle.stop_config,
    }))
}

async fn get_suggestion(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Suggestion>> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    if let Some(r) = session.stop_reason() {
        return Err(ApiError::conflict(format!("session stopped: {r}")));
    }
    suggestion_of(&id, &session)
        .map(Json)
        .ok_or_else(|| ApiError::conflict("no location left to suggest"))
}

async fn post_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Labelled>> {
    let handle = state.handle(&id)?;
    let req: LabelRequest = parse_body(&body)?;
    let mut session = Arc::clone(&handle.session)
        .try_write_owned()
        .map_err(|_| ApiError::conflict("another request is updating this session"))?;
    if let Some(r) = session.stop_reason() {
        return Err(ApiError::conflict(format!("session stopped: {r}")));
    }
    let (h, w) = (session.image().height() as i64, session.image().width() as i64);
    let [row, col] = req.q;
    if !(0..h).contains(&row) || !(0..w).contains(&col) {
        return Err(ApiError::bad_request(format!("q = [{row}, {col}] is outside the {h}x{w} image")));
    }
    let q = Pixel::new(row as usize, col as usize);
    if session.prompts().contains(q) {
        return Err(ApiError::bad_request(format!("{q} was already labelled")));
    }
    let given = req
        .label
        .map(|b| Label::try_from(b).map_err(|_| ApiError::bad_request(format!("label must be 0 or 1, got {b}"))))
        .transpose()?;
    let label = match (handle.mode, given) {
        (Mode::Human, Some(l)) => l,
        (Mode::Human, None) => return Err(ApiError::bad_request("human sessions need a label")),
        (Mode::Simulated, given) => {
            let truth = Label::from_mask(session.ground_truth().expect("simulated sessions carry ground truth"), q);
            if given.is_some_and(|l| l != truth) {
                return Err(ApiError::bad_request("simulated sessions take labels from the ground truth"));
            }
            truth
        }
    };
    let config = handle.stop_config;
    let sid = id.clone();
    let (reply, session) = blocking(move || {
        let record = session.apply_label(q, label)?.clone();
        let stop_reason = settle(&mut session, &config)?;
        let reply = Labelled {
            t: record.t,
            mask_digest: record.mask_sha256,
            iou: record.iou,
            next_suggestion: if stop_reason.is_some() { None } else { suggestion_of(&sid, &session) },
            stop_reason,
        };
        Ok((reply, session))
    })
    .await?;
    if reply.stop_reason.is_some() {
        state.persist(&handle, &session)?;
    }
    Ok(Json(reply))
}

async fn stop_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Stopped>> {
    let handle = state.handle(&id)?;
    let mut session = handle
        .session
        .try_write()
        .map_err(|_| ApiError::conflict("another request is updating this session"))?;
    session.stop(StopReason::AnnotatorEnded)?;
    state.persist(&handle, &session)?;
    Ok(Json(Stopped { stop_reason: StopReason::AnnotatorEnded, iterations: session.iteration() }))
}

#[derive(Debug, Deserialize)]
struct TrajectoryQuery {
    format: Option<String>,
}

async fn get_trajectory(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<TrajectoryQuery>,
) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    let t = session.trajectory();
    match query.format.as_deref() {
        None | Some("json") => Ok(Json(serde_json::json!({
            "strategy": t.strategy,
            "seed": t.seed,
            "stop": t.stop,
            "records": t.records,
        }))
        .into_response()),
        Some("jsonl") => Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], t.to_jsonl()).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown trajectory format {other:?}"))),
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_heatmap(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    Ok(png(heatmap_png(session.current_scores())?))
}

async fn get_scores(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ScoreGrid>> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    Ok(Json(ScoreGrid::from_scores(session.current_scores())))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    Ok(png(image_png(session.image())?))
}

async fn get_mask(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let session = handle.session.read().await;
    Ok(png(mask_png(session.current_mask())?))
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<Vec<DatasetInfo>> {
    let Some(dataset) = &state.dataset else { return Json(Vec::new()) };
    Json(
        dataset
            .dataset_names()
            .into_iter()
            .map(|name| DatasetInfo {
                item_count: dataset.manifest.items.iter().filter(|i| i.dataset == name).count(),
                id: name,
            })
            .collect(),
    )
}

async fn list_items(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<ItemInfo>>> {
    let dataset = state.dataset.as_ref().ok_or_else(|| ApiError::not_found("no dataset is loaded"))?;
    let items: Vec<ItemInfo> = dataset
        .manifest
        .items
        .iter()
        .filter(|i| i.dataset == id)
        .map(|i| ItemInfo { id: i.id.clone(), split: i.split })
        .collect();
    if items.is_empty() {
        return Err(ApiError::not_found(format!("no dataset {id}")));
    }
    Ok(Json(items))
}
