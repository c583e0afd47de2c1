//! HTTP API that hands out 3AFC tests to human annotators and records their
//! answers in the shared answer log.
//!
//! Endpoints:
//!
//! - `GET  /api/session` creates a session and returns its token.
//! - `GET  /api/session/{token}/next` leases the next pending test.
//! - `POST /api/session/{token}/answer` records `{test_id, chosen}`.
//! - `GET  /api/session/{token}/progress` reports `{answered, target}`.
//! - `GET  /api/item/{sample_id}/thumb` serves an image or a PCA glyph.
//!
//! The set of tests is regenerated from the seed and target on start-up;
//! which of them are answered is recovered from the log alone.

mod glyph;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use sfsl_core::annotation::{
    sample_tests, AnnotationError, AnswerLog, AnswerSource, TestAnswer, TripletTest,
};
use sfsl_core::data::{FeatureStore, SampleId, Split};
use sfsl_core::pipeline::stage_rng;

pub use glyph::Projection;

/// RNG stream for human tests, distinct from the pipeline's streams.
const HUMAN_STREAM: u64 = 4;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub seed: u64,
    /// Number of tests to collect.
    pub target: usize,
    pub lease: Duration,
    /// Directory of `<sample_id>.{png,jpg,jpeg,svg}` thumbnails.
    pub image_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            seed: 0,
            target: 1000,
            lease: Duration::from_secs(600),
            image_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("answer log entry `{0}` does not match the configured tests")]
    ForeignAnswer(String),
}

/// Monotonic time source, replaceable in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(Mutex<Duration>);

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.0.lock().unwrap()
    }
}

struct Lease {
    token: String,
    expires: Duration,
}

#[derive(Default)]
struct Session {
    current: Option<usize>,
    answered: usize,
}

struct Inner {
    log: AnswerLog,
    leases: HashMap<usize, Lease>,
    sessions: HashMap<String, Session>,
}

pub struct AppState {
    config: ServiceConfig,
    store: Arc<FeatureStore>,
    projection: Projection,
    tests: Vec<TripletTest>,
    index: HashMap<String, usize>,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl AppState {
    pub fn new(
        store: Arc<FeatureStore>,
        log: AnswerLog,
        config: ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StartError> {
        let pool = store.ids_in(Split::Base);
        let mut rng = stage_rng(config.seed, HUMAN_STREAM);
        let tests = sample_tests(&pool, config.target, 0, &mut rng)?;
        let index: HashMap<String, usize> = tests
            .iter()
            .enumerate()
            .map(|(i, t)| (t.test_id.clone(), i))
            .collect();
        for a in log.answers() {
            match index.get(&a.test_id) {
                Some(&i) if tests[i].items == a.items => {}
                _ => return Err(StartError::ForeignAnswer(a.test_id.clone())),
            }
        }
        Ok(AppState {
            projection: Projection::fit(&store),
            config,
            store,
            tests,
            index,
            clock,
            inner: Mutex::new(Inner {
                log,
                leases: HashMap::new(),
                sessions: HashMap::new(),
            }),
        })
    }

    pub fn answered(&self) -> usize {
        self.inner.lock().unwrap().log.len()
    }
}

/// Error body: a machine-readable code and a message.
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "code": self.code, "message": self.message }));
        (self.status, body).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionCreated {
    pub token: String,
    pub answered: usize,
    pub target: usize,
}

/// A leased test, or `status = "completed"` with empty fields.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NextTest {
    pub status: String,
    pub test_id: String,
    pub item0: String,
    pub item1: String,
    pub item2: String,
    pub thumb0: String,
    pub thumb1: String,
    pub thumb2: String,
    pub lease_secs: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AnswerBody {
    pub test_id: String,
    pub chosen: i64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Ack {
    /// `recorded` for a new answer, `duplicate` for an identical retry.
    pub status: String,
    pub answered: usize,
    pub target: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Progress {
    pub answered: usize,
    pub target: usize,
    pub session_answered: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", get(create_session))
        .route("/api/session/{token}/next", get(next_test))
        .route("/api/session/{token}/answer", post(submit_answer))
        .route("/api/session/{token}/progress", get(progress))
        .route("/api/item/{sample_id}/thumb", get(thumb))
        .with_state(state)
}

fn unknown_session(token: &str) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "unknown_session",
        format!("no session `{token}`"),
    )
}

async fn create_session(State(app): State<Arc<AppState>>) -> Json<SessionCreated> {
    let token = uuid::Uuid::new_v4().simple().to_string();
    let mut inner = app.inner.lock().unwrap();
    inner.sessions.insert(token.clone(), Session::default());
    Json(SessionCreated {
        token,
        answered: inner.log.len(),
        target: app.tests.len(),
    })
}

async fn next_test(
    State(app): State<Arc<AppState>>,
    Path(token): Path<String>,
) -> Result<Json<NextTest>, ApiError> {
    let now = app.clock.now();
    let mut guard = app.inner.lock().unwrap();
    let inner = &mut *guard;
    let session = inner
        .sessions
        .get_mut(&token)
        .ok_or_else(|| unknown_session(&token))?;

    // Keep handing out the current test while the lease holds.
    let held = session.current.filter(|&i| {
        inner.log.get(&app.tests[i].test_id).is_none()
            && inner
                .leases
                .get(&i)
                .is_some_and(|l| l.token == token && l.expires > now)
    });
    let pick = match held {
        Some(i) => Some(i),
        None => (0..app.tests.len()).find(|&i| {
            inner.log.get(&app.tests[i].test_id).is_none()
                && inner.leases.get(&i).is_none_or(|l| l.expires <= now)
        }),
    };
    let Some(i) = pick else {
        session.current = None;
        if inner.log.len() >= app.tests.len() {
            return Ok(Json(NextTest {
                status: "completed".into(),
                test_id: String::new(),
                item0: String::new(),
                item1: String::new(),
                item2: String::new(),
                thumb0: String::new(),
                thumb1: String::new(),
                thumb2: String::new(),
                lease_secs: 0,
            }));
        }
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "all_leased",
            "every pending test is leased to another session; retry later",
        ));
    };
    session.current = Some(i);
    inner.leases.insert(
        i,
        Lease {
            token: token.clone(),
            expires: now + app.config.lease,
        },
    );
    let t = &app.tests[i];
    let thumb = |k: usize| format!("/api/item/{}/thumb", t.items[k]);
    Ok(Json(NextTest {
        status: "pending".into(),
        test_id: t.test_id.clone(),
        item0: t.items[0].to_string(),
        item1: t.items[1].to_string(),
        item2: t.items[2].to_string(),
        thumb0: thumb(0),
        thumb1: thumb(1),
        thumb2: thumb(2),
        lease_secs: app.config.lease.as_secs(),
    }))
}

async fn submit_answer(
    State(app): State<Arc<AppState>>,
    Path(token): Path<String>,
    body: Result<Json<AnswerBody>, JsonRejection>,
) -> Result<Json<Ack>, ApiError> {
    let Json(body) =
        body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let now = app.clock.now();
    let mut guard = app.inner.lock().unwrap();
    let inner = &mut *guard;
    if !inner.sessions.contains_key(&token) {
        return Err(unknown_session(&token));
    }
    if !(0..3).contains(&body.chosen) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_choice",
            format!("chosen must be 0, 1 or 2, got {}", body.chosen),
        ));
    }
    let chosen = body.chosen as u8;
    let &i = app.index.get(&body.test_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_test",
            format!("no test `{}`", body.test_id),
        )
    })?;
    let target = app.tests.len();

    if let Some(prev) = inner.log.get(&body.test_id) {
        if prev.chosen == chosen {
            return Ok(Json(Ack {
                status: "duplicate".into(),
                answered: inner.log.len(),
                target,
            }));
        }
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflicting_answer",
            format!("test `{}` already has a different answer", body.test_id),
        ));
    }
    if let Some(l) = inner.leases.get(&i) {
        if l.token != token && l.expires > now {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "not_leased",
                format!("test `{}` is leased to another session", body.test_id),
            ));
        }
    }

    let answer = TestAnswer::new(&app.tests[i], chosen, AnswerSource::Human, chrono::Utc::now());
    inner.log.append(answer).map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_write_failed", e.to_string())
    })?;
    inner.leases.remove(&i);
    let session = inner.sessions.get_mut(&token).expect("checked above");
    session.answered += 1;
    if session.current == Some(i) {
        session.current = None;
    }
    Ok(Json(Ack {
        status: "recorded".into(),
        answered: inner.log.len(),
        target,
    }))
}

async fn progress(
    State(app): State<Arc<AppState>>,
    Path(token): Path<String>,
) -> Result<Json<Progress>, ApiError> {
    let inner = app.inner.lock().unwrap();
    let session = inner
        .sessions
        .get(&token)
        .ok_or_else(|| unknown_session(&token))?;
    Ok(Json(Progress {
        answered: inner.log.len(),
        target: app.tests.len(),
        session_answered: session.answered,
    }))
}

const IMAGE_TYPES: [(&str, &str); 4] = [
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("svg", "image/svg+xml"),
];

async fn thumb(
    State(app): State<Arc<AppState>>,
    Path(sample_id): Path<String>,
) -> Result<Response, ApiError> {
    let id = SampleId::new(sample_id);
    let features = app.store.features(&id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_item",
            format!("no sample `{id}`"),
        )
    })?;
    let plain = !id.as_str().contains(['/', '\\']) && !id.as_str().starts_with('.');
    if let (Some(dir), true) = (&app.config.image_dir, plain) {
        for (ext, mime) in IMAGE_TYPES {
            let path = dir.join(format!("{id}.{ext}"));
            if let Ok(bytes) = tokio::fs::read(&path).await {
                return Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response());
            }
        }
    }
    let svg = app.projection.glyph(features);
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
