//! HTTP rating service and the live-remix WebSocket.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use drmx_core::evalstats::AnalysisMode;
use drmx_core::live::{encode_block, LiveRemixer};
use drmx_core::separator::{oracle_masker, LstmMasker, MaskEstimator, RemixParams, MODEL_BINS};
use drmx_core::session::{
    summarize, Quarantined, RatingInput, RatingSession, SessionError, SessionStore,
    DEFAULT_SIGNIFICANCE,
};
use drmx_core::{Attribute, AudioBuffer, LstmWeights};

use crate::catalogue::{Catalogue, CatalogueError};

pub struct AppState {
    catalogue: Catalogue,
    store: SessionStore,
    sessions: Mutex<HashMap<String, RatingSession>>,
    weights: Option<Arc<LstmWeights>>,
}

pub type Shared = Arc<AppState>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub stimuli_dir: PathBuf,
    pub sessions_dir: PathBuf,
    pub weights: Option<Arc<LstmWeights>>,
}

/// Loads the catalogue and every persisted session. Sessions that fail to
/// parse are quarantined and returned for logging.
pub fn build_state(config: ServiceConfig) -> anyhow::Result<(Shared, Vec<Quarantined>)> {
    let catalogue = Catalogue::load(&config.stimuli_dir)?;
    let store = SessionStore::open(&config.sessions_dir)?;
    let (loaded, quarantined) = store.load_all()?;
    let sessions = loaded.into_iter().map(|s| (s.id.clone(), s)).collect();
    let state = AppState {
        catalogue,
        store,
        sessions: Mutex::new(sessions),
        weights: config.weights,
    };
    Ok((Arc::new(state), quarantined))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/next-screen", get(next_screen))
        .route("/sessions/{id}/ratings", post(submit_ratings))
        .route("/sessions/{id}/results", get(session_results))
        .route("/results", get(pooled_results))
        .route("/stimuli/{handle}/audio", get(stimulus_audio))
        .route("/live-remix", get(live_remix))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let code = match e {
            SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::Complete => StatusCode::CONFLICT,
            SessionError::InvalidRating(_)
            | SessionError::UnknownItem(_)
            | SessionError::NoItems => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<CatalogueError> for ApiError {
    fn from(e: CatalogueError) -> Self {
        let code = match e {
            CatalogueError::UnknownItem(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub subject: String,
    pub attribute: Attribute,
    #[serde(default)]
    pub items: Option<Vec<String>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub screen_count: usize,
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let mut items = state.catalogue.session_items();
    if let Some(wanted) = &req.items {
        if let Some(missing) = wanted
            .iter()
            .find(|w| !items.iter().any(|i| &i.item_id == *w))
        {
            return Err(SessionError::UnknownItem(missing.clone()).into());
        }
        items.retain(|i| wanted.contains(&i.item_id));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let id = uuid::Uuid::new_v4().to_string();
    let session = RatingSession::new(id.clone(), req.subject, req.attribute, &items, seed)?;
    state.store.save(&session)?;
    let screen_count = session.screens.len();
    state
        .sessions
        .lock()
        .expect("session lock")
        .insert(id.clone(), session);
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: id,
            screen_count,
        }),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub subject: String,
    pub attribute: Attribute,
    pub complete: bool,
    pub screens_done: usize,
    pub screen_count: usize,
}

async fn list_sessions(State(state): State<Shared>) -> Json<Vec<SessionSummary>> {
    let sessions = state.sessions.lock().expect("session lock");
    let mut list: Vec<SessionSummary> = sessions
        .values()
        .map(|s| SessionSummary {
            session_id: s.id.clone(),
            subject: s.subject.clone(),
            attribute: s.attribute,
            complete: s.current_screen().is_none(),
            screens_done: s.cursor,
            screen_count: s.screens.len(),
        })
        .collect();
    list.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    Json(list)
}

async fn next_screen(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let sessions = state.sessions.lock().expect("session lock");
    let session = sessions
        .get(&id)
        .ok_or_else(|| SessionError::UnknownSession(id.clone()))?;
    Ok(Json(match session.current_screen() {
        Some(view) => json!({ "complete": false, "screen": view }),
        None => json!({ "complete": true, "screen": null }),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub ratings: Vec<RatingInput>,
}

async fn submit_ratings(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<RatingSubmission>,
) -> ApiResult<Json<serde_json::Value>> {
    let mut sessions = state.sessions.lock().expect("session lock");
    let session = sessions
        .get_mut(&id)
        .ok_or_else(|| SessionError::UnknownSession(id.clone()))?;
    let mut updated = session.clone();
    updated.submit(&body.ratings)?;
    // Persist before acknowledging; memory only changes once the file does.
    state.store.save(&updated)?;
    *session = updated;
    Ok(Json(json!({
        "accepted": body.ratings.len(),
        "complete": session.current_screen().is_none(),
    })))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ResultsQuery {
    #[serde(default)]
    pub mode: Option<AnalysisMode>,
    #[serde(default)]
    pub attribute: Option<Attribute>,
}

async fn session_results(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ResultsQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let sessions = state.sessions.lock().expect("session lock");
    let session = sessions
        .get(&id)
        .ok_or_else(|| SessionError::UnknownSession(id.clone()))?;
    if session.current_screen().is_some() {
        return Err(ApiError(
            StatusCode::CONFLICT,
            "session is still open".into(),
        ));
    }
    let res = summarize(
        &[session],
        q.mode.unwrap_or(AnalysisMode::Pooled),
        DEFAULT_SIGNIFICANCE,
    )?;
    Ok(Json(serde_json::to_value(res).expect("plain results")))
}

/// Results over all complete sessions rating one attribute.
async fn pooled_results(
    State(state): State<Shared>,
    Query(q): Query<ResultsQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let attribute = q.attribute.ok_or_else(|| {
        ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            "attribute query parameter is required".into(),
        )
    })?;
    let sessions = state.sessions.lock().expect("session lock");
    let complete: Vec<&RatingSession> = sessions
        .values()
        .filter(|s| s.attribute == attribute && s.current_screen().is_none())
        .collect();
    if complete.is_empty() {
        return Err(ApiError(
            StatusCode::CONFLICT,
            "no complete sessions".into(),
        ));
    }
    let res = summarize(
        &complete,
        q.mode.unwrap_or(AnalysisMode::Pooled),
        DEFAULT_SIGNIFICANCE,
    )?;
    Ok(Json(serde_json::to_value(res).expect("plain results")))
}

async fn stimulus_audio(
    State(state): State<Shared>,
    Path(handle): Path<String>,
) -> ApiResult<Response> {
    let target = {
        let sessions = state.sessions.lock().expect("session lock");
        sessions
            .values()
            .find_map(|s| s.resolve(&handle).map(|(item, c)| (item.to_string(), c)))
    };
    let (item, condition) =
        target.ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "unknown stimulus".into()))?;
    let bytes = state.catalogue.stimulus_bytes(&item, condition)?;
    Ok((
        [
            (header::CONTENT_TYPE, "audio/wav"),
            (header::CACHE_CONTROL, "no-store"),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Clone, Deserialize)]
pub struct LiveQuery {
    pub item: Option<String>,
    /// `oracle` (needs stems, the default) or `lstm` (needs weights).
    pub masker: Option<String>,
    /// Real-time pacing, on by default.
    pub pace: Option<bool>,
    pub alpha_db: Option<f64>,
    pub lambda_db: Option<f64>,
}

/// Client message on the live socket; absent fields keep their value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemixUpdate {
    pub alpha_db: Option<f64>,
    pub lambda_db: Option<f64>,
}

fn downmix(buffer: &AudioBuffer) -> Vec<f64> {
    let n = buffer.num_channels() as f64;
    (0..buffer.len())
        .map(|i| buffer.channels().iter().map(|c| c[i]).sum::<f64>() / n)
        .collect()
}

fn to_db(gain: f64) -> f64 {
    20.0 * gain.log10()
}

async fn live_remix(
    ws: WebSocketUpgrade,
    State(state): State<Shared>,
    Query(q): Query<LiveQuery>,
) -> ApiResult<Response> {
    let item = match &q.item {
        Some(id) => state.catalogue.item(id)?.clone(),
        None => state
            .catalogue
            .items()
            .first()
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "catalogue is empty".into()))?,
    };
    let (speech, background) = state.catalogue.stems(&item.item_id)?;
    let (speech, background) = (downmix(&speech), downmix(&background));
    let mixture: Vec<f64> = speech.iter().zip(&background).map(|(s, b)| s + b).collect();
    let rate = item.sample_rate;
    let unprocessable = |m: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, m);
    let estimator: Box<dyn MaskEstimator> = match q.masker.as_deref().unwrap_or("oracle") {
        "oracle" => Box::new(
            oracle_masker(&speech, &background, rate).map_err(|e| unprocessable(e.to_string()))?,
        ),
        "lstm" => {
            let w = state
                .weights
                .clone()
                .ok_or_else(|| unprocessable("server has no model weights".into()))?;
            if w.shape().input != MODEL_BINS {
                return Err(unprocessable("model weights do not take 257 bins".into()));
            }
            Box::new(LstmMasker::new(w).map_err(|e| unprocessable(e.to_string()))?)
        }
        other => return Err(unprocessable(format!("unknown masker {other}"))),
    };
    let defaults = RemixParams::default();
    let params = RemixParams::from_db(
        q.alpha_db.unwrap_or(to_db(defaults.alpha)),
        q.lambda_db.unwrap_or(to_db(defaults.lambda)),
    );
    let remixer =
        LiveRemixer::new(rate, estimator, params).map_err(|e| unprocessable(e.to_string()))?;
    let pace = q.pace.unwrap_or(true);
    Ok(ws.on_upgrade(move |socket| async move {
        if let Err(e) = run_live(socket, mixture, remixer, pace).await {
            tracing::debug!("live session ended: {e}");
        }
    }))
}

async fn run_live(
    socket: WebSocket,
    source: Vec<f64>,
    mut remixer: LiveRemixer,
    pace: bool,
) -> Result<(), axum::Error> {
    let (mut tx, mut rx) = socket.split();
    let hop = remixer.block_len();
    let rate = remixer.sample_rate();
    let blocks = (source.len() + remixer.latency_samples()).div_ceil(hop);
    let ready = json!({
        "type": "ready",
        "sample_rate": rate,
        "block_len": hop,
        "latency_samples": remixer.latency_samples(),
        "latency_ms": remixer.latency_samples() as f64 * 1000.0 / rate as f64,
        "total_blocks": blocks,
    });
    tx.send(Message::Text(ready.to_string().into())).await?;
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(hop as f64 / rate as f64));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut sent = 0;
    loop {
        tokio::select! {
            biased;
            msg = rx.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    let reply = match serde_json::from_str::<RemixUpdate>(&text) {
                        Ok(update) => {
                            let current = remixer.params();
                            let alpha_db = update.alpha_db.unwrap_or(to_db(current.alpha));
                            let lambda_db = update.lambda_db.unwrap_or(to_db(current.lambda));
                            match remixer.update(RemixParams::from_db(alpha_db, lambda_db)) {
                                Ok(at) => json!({
                                    "type": "applied",
                                    "alpha_db": alpha_db,
                                    "lambda_db": lambda_db,
                                    "applied_at_sample": at,
                                }),
                                Err(e) => json!({ "type": "error", "message": e.to_string() }),
                            }
                        }
                        Err(e) => json!({ "type": "error", "message": e.to_string() }),
                    };
                    tx.send(Message::Text(reply.to_string().into())).await?;
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return Ok(()),
                Some(Ok(_)) => {}
            },
            _ = async { if pace { ticker.tick().await; } } => {
                if sent == blocks {
                    tx.send(Message::Text(json!({ "type": "end" }).to_string().into())).await?;
                    tx.close().await?;
                    return Ok(());
                }
                let start = sent * hop;
                let mut block: Vec<f64> = source.get(start..(start + hop).min(source.len())).unwrap_or(&[]).to_vec();
                block.resize(hop, 0.0);
                let out = match remixer.process(&block) {
                    Ok(out) => out,
                    Err(e) => {
                        tx.send(Message::Text(json!({ "type": "error", "message": e.to_string() }).to_string().into())).await?;
                        return Ok(());
                    }
                };
                tx.send(Message::Binary(encode_block(&out).into())).await?;
                sent += 1;
            }
        }
    }
}
