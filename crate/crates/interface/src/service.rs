//! HTTP session service: one active reward-design run per session, answered
//! by a person (or a script) one query at a time.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use aird::experiment::{Experiment, ExperimentConfig, PreparedQuery, Query};
use aird::reward_space::WEIGHT_BOUND;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use uuid::Uuid;

use crate::protocol::{
    Answer, AnswerAccepted, AnswerRequest, CandidateView, CreateSession, ErrorBody, HistoryEntry, Preview,
    PreviewRequest, QueryView, SessionCreated, SessionState, Status, TrajectoryRender,
};

const TOP_K: usize = 5;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found() -> Self {
        Self::new(StatusCode::NOT_FOUND, "no such session")
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Outstanding {
    prepared: PreparedQuery,
    view: QueryView,
}

struct Session {
    id: Uuid,
    experiment: Experiment,
    outstanding: Option<Outstanding>,
    history: Vec<HistoryEntry>,
}

impl Session {
    fn status(&self) -> Status {
        if self.experiment.is_finished() {
            Status::Finished
        } else if self.outstanding.is_some() {
            Status::AwaitingAnswer
        } else {
            Status::Idle
        }
    }

    fn render(&self, weights: &[f64]) -> ApiResult<TrajectoryRender> {
        let exp = &self.experiment;
        TrajectoryRender::plan(exp.env(), weights, exp.config().planner.horizon).map_err(|e| ApiError::internal(e.to_string()))
    }

    /// The outstanding query, selecting a new one if none is pending.
    fn current_query(&mut self) -> ApiResult<QueryView> {
        if let Some(o) = &self.outstanding {
            return Ok(o.view.clone());
        }
        if self.experiment.is_finished() {
            return Err(ApiError::conflict("session finished: every query has been answered"));
        }
        let prepared = self.experiment.next_query().map_err(|e| ApiError::internal(e.to_string()))?;
        let candidates = prepared
            .candidates
            .iter()
            .enumerate()
            .map(|(index, weights)| {
                Ok(CandidateView {
                    index,
                    weights: weights.clone(),
                    expected_features: prepared.expectations.row(index).to_vec(),
                    trajectory: self.render(weights)?,
                })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        let view = QueryView {
            query_id: prepared.id,
            query: prepared.query.clone(),
            candidates,
            posterior: self.experiment.posterior().summary(TOP_K),
        };
        self.outstanding = Some(Outstanding { prepared, view: view.clone() });
        Ok(view)
    }

    fn answer(&mut self, request: AnswerRequest) -> ApiResult<AnswerAccepted> {
        let Some(outstanding) = &self.outstanding else {
            return Err(ApiError::conflict(format!("query {} is not awaiting an answer", request.query_id)));
        };
        if outstanding.prepared.id != request.query_id {
            return Err(ApiError::conflict(format!(
                "query {} is stale; the outstanding query is {}",
                request.query_id, outstanding.prepared.id
            )));
        }
        let n = outstanding.prepared.candidates.len();
        let index = match (&request.answer, &outstanding.prepared.query) {
            (Answer::Index(i), _) if *i < n => *i,
            (Answer::Index(i), _) => return Err(ApiError::unprocessable(format!("answer {i} outside a query of {n}"))),
            (Answer::FreeWeights { free_weights }, Query::Feature(fq)) => {
                fq.nearest_candidate(free_weights).map_err(|e| ApiError::unprocessable(e.to_string()))?
            }
            (Answer::FreeWeights { .. }, Query::Discrete(_)) => {
                return Err(ApiError::unprocessable("discrete queries take a candidate index"))
            }
        };
        let outstanding = self.outstanding.take().expect("checked above");
        let metrics = match self.experiment.answer(&outstanding.prepared, index) {
            Ok(m) => m,
            Err(e) => {
                self.outstanding = Some(outstanding);
                return Err(ApiError::internal(e.to_string()));
            }
        };
        self.history.push(HistoryEntry {
            query_id: request.query_id,
            query: outstanding.prepared.query,
            answer: request.answer,
            answer_index: index,
            answered_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
        });
        Ok(AnswerAccepted {
            query_id: request.query_id,
            answer_index: index,
            metrics,
            posterior: self.experiment.posterior().summary(TOP_K),
            status: self.status(),
        })
    }

    fn state(&self) -> SessionState {
        let exp = &self.experiment;
        SessionState {
            id: self.id.to_string(),
            status: self.status(),
            config: exp.config().clone(),
            answered: exp.answered(),
            n_queries: exp.config().n_queries,
            outstanding_query_id: self.outstanding.as_ref().map(|o| o.prepared.id),
            history: self.history.clone(),
            metrics: exp.metrics().clone(),
            posterior: exp.posterior().summary(TOP_K),
        }
    }

    fn preview(&self, request: PreviewRequest) -> ApiResult<Preview> {
        let exp = &self.experiment;
        let d = exp.config().n_features;
        if request.weights.len() != d {
            return Err(ApiError::unprocessable(format!("expected {d} weights, got {}", request.weights.len())));
        }
        if request.weights.iter().any(|w| !w.is_finite() || w.abs() > WEIGHT_BOUND) {
            return Err(ApiError::unprocessable(format!("weights must lie in [-{WEIGHT_BOUND}, {WEIGHT_BOUND}]")));
        }
        let planner = exp.candidate_planner();
        let e = planner.expectations(std::slice::from_ref(&request.weights)).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Preview { expected_features: e.row(0).to_vec(), trajectory: self.render(&request.weights)? })
    }
}

type SharedSession = Arc<tokio::sync::Mutex<Session>>;

struct AppState {
    base: ExperimentConfig,
    sessions: Mutex<HashMap<Uuid, SharedSession>>,
}

impl AppState {
    fn session(&self, id: &str) -> ApiResult<SharedSession> {
        let id = Uuid::parse_str(id).map_err(|_| ApiError::not_found())?;
        self.sessions.lock().expect("session map").get(&id).cloned().ok_or_else(ApiError::not_found)
    }
}

/// Parses a JSON object body; any syntax or shape error is a 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let malformed = |e: serde_json::Error| ApiError::unprocessable(format!("malformed body: {e}"));
    let value: serde_json::Value = serde_json::from_slice(body).map_err(malformed)?;
    if !value.is_object() {
        return Err(ApiError::unprocessable("body must be a JSON object"));
    }
    serde_json::from_value(value).map_err(malformed)
}

/// Overlays `overrides` onto `base`, recursing into nested tables.
fn merge(base: &mut serde_json::Value, overrides: serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn session_config(base: &ExperimentConfig, request: CreateSession) -> ApiResult<ExperimentConfig> {
    let mut value = serde_json::to_value(base).map_err(|e| ApiError::internal(e.to_string()))?;
    if let Some(overrides) = request.config {
        if !overrides.is_object() {
            return Err(ApiError::unprocessable("config must be an object"));
        }
        merge(&mut value, overrides);
    }
    let mut config: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| ApiError::unprocessable(format!("invalid config: {e}")))?;
    if let Some(seed) = request.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| ApiError::unprocessable(format!("invalid config: {e}")))?;
    Ok(config)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let request: CreateSession = if body.iter().all(u8::is_ascii_whitespace) { CreateSession::default() } else { parse_body(&body)? };
    let config = session_config(&app.base, request)?;
    let experiment = blocking(move || Experiment::new(config).map_err(|e| ApiError::unprocessable(e.to_string()))).await?;
    let id = Uuid::new_v4();
    let created = SessionCreated {
        id: id.to_string(),
        status: Status::Idle,
        n_queries: experiment.config().n_queries,
        config: experiment.config().clone(),
        posterior: experiment.posterior().summary(TOP_K),
    };
    let session = Session { id, experiment, outstanding: None, history: Vec::new() };
    let created = SessionCreated { status: session.status(), ..created };
    app.sessions.lock().expect("session map").insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_query(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<QueryView>> {
    let mut session = app.session(&id)?.lock_owned().await;
    blocking(move || session.current_query()).await.map(Json)
}

async fn post_answer(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<AnswerAccepted>> {
    let session = app.session(&id)?;
    let request: AnswerRequest = parse_body(&body)?;
    let mut session = session.lock_owned().await;
    blocking(move || session.answer(request)).await.map(Json)
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    let session = app.session(&id)?;
    let session = session.lock().await;
    Ok(Json(session.state()))
}

async fn get_metrics(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let csv = session.lock().await.experiment.metrics().to_csv();
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn post_preview(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Preview>> {
    let session = app.session(&id)?;
    let request: PreviewRequest = parse_body(&body)?;
    let session = session.lock_owned().await;
    blocking(move || session.preview(request)).await.map(Json)
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let id = Uuid::parse_str(&id).map_err(|_| ApiError::not_found())?;
    match app.sessions.lock().expect("session map").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found()),
    }
}

async fn health() -> &'static str {
    "ok"
}

/// Routes of the session service. New sessions start from `base`.
pub fn router(base: ExperimentConfig) -> Router {
    let state = Arc::new(AppState { base, sessions: Mutex::new(HashMap::new()) });
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state).delete(delete_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/query", get(get_query))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/preview", post(post_preview))
        .with_state(state)
}
