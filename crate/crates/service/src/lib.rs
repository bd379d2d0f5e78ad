//! HTTP annotation service.
//!
//! Serves session streams on the aligned frame clock and accepts fear-level
//! spans from annotators. Spans are persisted to one append-only JSONL log
//! per session; see [`store`].

pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use fearscope_core::align::Skeleton;
use fearscope_core::labels::{fuse_session, FusedTimeline};
use fearscope_core::model::{FrameClock, SessionManifest};
use fearscope_core::pipeline::{self, PipelineError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::store::{LiveState, SessionLog, SpanBody, StoreError};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("session `{session}` log: {source}")]
    Store { session: String, source: StoreError },
    #[error("invalid session id `{0}`")]
    SessionId(String),
    #[error("session id `{0}` appears twice")]
    DuplicateSession(String),
}

/// A JSON error body `{code, message}` (plus `detail` where useful) with its status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), detail: None }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(d) = self.detail {
            body["detail"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// One loaded session: aligned streams in memory, the log behind a single writer.
pub struct Session {
    pub manifest: SessionManifest,
    pub audio_path: PathBuf,
    pub clock: FrameClock,
    pub skeletons: Vec<Skeleton>,
    pub physio: Vec<(f64, f64)>,
    /// RMS of the audio samples inside each frame.
    pub audio_energy: Vec<f64>,
    log: Arc<tokio::sync::Mutex<SessionLog>>,
    snapshot: RwLock<Arc<LiveState>>,
}

impl Session {
    pub fn snapshot(&self) -> Arc<LiveState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Fusion of the live spans over the aligned clock. The roster is every
    /// annotator with a live span or a done mark.
    pub fn fused(&self) -> FusedTimeline {
        let state = self.snapshot();
        fuse_session(&state.live_spans(), &self.clock, &state.roster())
    }
}

pub struct AppState {
    pub sessions: BTreeMap<String, Arc<Session>>,
    pub store_dir: PathBuf,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

/// Per-frame RMS of the aligned audio, whose first sample sits on the clock start.
pub fn frame_energy(samples: &[f64], sample_rate: u32, clock: &FrameClock) -> Vec<f64> {
    let at = |i: usize| ((i as f64 * sample_rate as f64 / clock.frame_rate).round() as usize).min(samples.len());
    (0..clock.frame_count)
        .map(|i| {
            let chunk = &samples[at(i)..at(i + 1).max(at(i))];
            if chunk.is_empty() {
                0.0
            } else {
                (chunk.iter().map(|x| x * x).sum::<f64>() / chunk.len() as f64).sqrt()
            }
        })
        .collect()
}

pub fn log_path(store_dir: &Path, session_id: &str) -> PathBuf {
    store_dir.join(format!("{session_id}.jsonl"))
}

impl AppState {
    /// Loads and aligns each session and replays its log from `store_dir`.
    pub fn load(manifest_paths: &[PathBuf], store_dir: &Path) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(store_dir)
            .map_err(|source| PipelineError::Io { path: store_dir.to_path_buf(), source })?;
        let mut sessions = BTreeMap::new();
        for path in manifest_paths {
            let raw = pipeline::load_session(path)?;
            let id = raw.manifest.session_id.clone();
            if !valid_session_id(&id) {
                return Err(ServiceError::SessionId(id));
            }
            if sessions.contains_key(&id) {
                return Err(ServiceError::DuplicateSession(id));
            }
            let aligned = pipeline::align_raw(&raw)?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            let audio_path = raw.manifest.resolve(&base, &raw.manifest.streams.audio);
            let log = SessionLog::open(&log_path(store_dir, &id))
                .map_err(|source| ServiceError::Store { session: id.clone(), source })?;
            let snapshot = RwLock::new(Arc::new(log.state().clone()));
            let session = Session {
                audio_energy: frame_energy(&aligned.audio.samples, aligned.audio.sample_rate, &aligned.clock),
                manifest: raw.manifest,
                audio_path,
                clock: aligned.clock,
                skeletons: aligned.keypoints,
                physio: aligned.physio,
                log: Arc::new(tokio::sync::Mutex::new(log)),
                snapshot,
            };
            sessions.insert(id, Arc::new(session));
        }
        Ok(Self { sessions, store_dir: store_dir.to_path_buf() })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}/manifest", get(manifest))
        .route("/sessions/{id}/timeline", get(timeline))
        .route("/sessions/{id}/skeleton", get(skeleton))
        .route("/sessions/{id}/audio", get(audio))
        .route("/sessions/{id}/annotations", get(list_annotations).post(post_annotation))
        .route("/sessions/{id}/fused", get(fused))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, sessions = state.sessions.len(), "annotation service listening");
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Serialize)]
struct SessionSummary<'a> {
    session_id: &'a str,
    game_id: u8,
    frame_count: usize,
    frame_rate: f64,
    start_ms: i64,
    duration_ms: i64,
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<SessionSummary> = state
        .sessions
        .values()
        .map(|s| SessionSummary {
            session_id: &s.manifest.session_id,
            game_id: s.manifest.game_id,
            frame_count: s.clock.frame_count,
            frame_rate: s.clock.frame_rate,
            start_ms: s.clock.start_ms,
            duration_ms: s.clock.duration_ms(),
        })
        .collect();
    Json(json!({ "sessions": list }))
}

async fn manifest(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = state.session(&id)?;
    Ok(Json(json!({"manifest": s.manifest, "aligned_clock": s.clock})))
}

#[derive(Debug, Deserialize)]
struct TimelineQuery {
    bucket: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TimelinePoint {
    frame_index: usize,
    time_ms: i64,
    heart_rate: f64,
    breath_rate: f64,
    audio_energy: f64,
}

/// Max-pools the per-frame series into buckets of `bucket` frames.
async fn timeline(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TimelineQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let s = state.session(&id)?;
    let bucket = q.bucket.unwrap_or(1);
    if bucket == 0 {
        return Err(ApiError::bad_request("invalid_bucket", "bucket must be positive"));
    }
    let max = |xs: &mut dyn Iterator<Item = f64>| xs.fold(f64::NEG_INFINITY, f64::max);
    let points: Vec<TimelinePoint> = (0..s.clock.frame_count)
        .step_by(bucket)
        .map(|first| {
            let r = first..(first + bucket).min(s.clock.frame_count);
            TimelinePoint {
                frame_index: first,
                time_ms: s.clock.tick(first),
                heart_rate: max(&mut s.physio[r.clone()].iter().map(|p| p.0)),
                breath_rate: max(&mut s.physio[r.clone()].iter().map(|p| p.1)),
                audio_energy: max(&mut s.audio_energy[r].iter().copied()),
            }
        })
        .collect();
    Ok(Json(json!({"session_id": id, "bucket": bucket, "points": points})))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    from: Option<usize>,
    to: Option<usize>,
}

async fn skeleton(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RangeQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let s = state.session(&id)?;
    let n = s.clock.frame_count;
    let (from, to) = (q.from.unwrap_or(0), q.to.unwrap_or(n));
    if from >= to || to > n {
        return Err(ApiError::bad_request("invalid_range", format!("frame range [{from}, {to}) outside [0, {n})")));
    }
    let frames: Vec<serde_json::Value> = (from..to)
        .map(|i| json!({"frame_index": i, "time_ms": s.clock.tick(i), "joints": s.skeletons[i]}))
        .collect();
    Ok(Json(json!({"session_id": id, "from": from, "to": to, "frames": frames})))
}

/// Parses a single `bytes=` range against a body of `len` bytes.
/// `None` means the header is absent or not understood; `Some(Err)` is unsatisfiable.
fn parse_range(value: &str, len: u64) -> Option<Result<(u64, u64), ()>> {
    let spec = value.trim().strip_prefix("bytes=")?;
    if spec.contains(',') {
        return None;
    }
    let (a, b) = spec.split_once('-')?;
    let (a, b) = (a.trim(), b.trim());
    let range = match (a.is_empty(), b.is_empty()) {
        (true, true) => return None,
        (true, false) => {
            let n: u64 = b.parse().ok()?;
            if n == 0 || len == 0 {
                return Some(Err(()));
            }
            (len.saturating_sub(n), len - 1)
        }
        (false, _) => {
            let start: u64 = a.parse().ok()?;
            let end: u64 = if b.is_empty() { u64::MAX } else { b.parse().ok()? };
            if end < start {
                return None;
            }
            if start >= len {
                return Some(Err(()));
            }
            (start, end.min(len - 1))
        }
    };
    Some(Ok(range))
}

async fn audio(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let bytes = tokio::fs::read(&s.audio_path).await.map_err(|e| ApiError::internal(format!("reading audio: {e}")))?;
    let len = bytes.len() as u64;
    let range = headers.get(header::RANGE).and_then(|v| v.to_str().ok()).and_then(|v| parse_range(v, len));
    let mut response = match range {
        None => (StatusCode::OK, bytes).into_response(),
        Some(Err(())) => {
            let mut r = ApiError::new(StatusCode::RANGE_NOT_SATISFIABLE, "range_not_satisfiable", "requested range outside the file")
                .into_response();
            r.headers_mut().insert(header::CONTENT_RANGE, HeaderValue::from_str(&format!("bytes */{len}")).expect("ascii"));
            return Ok(r);
        }
        Some(Ok((start, end))) => {
            let body = Body::from(bytes[start as usize..=end as usize].to_vec());
            let mut r = (StatusCode::PARTIAL_CONTENT, body).into_response();
            r.headers_mut().insert(
                header::CONTENT_RANGE,
                HeaderValue::from_str(&format!("bytes {start}-{end}/{len}")).expect("ascii"),
            );
            r
        }
    };
    let h = response.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("audio/wav"));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    Ok(response)
}

fn annotator(headers: &HeaderMap) -> ApiResult<Option<String>> {
    match headers.get(ANNOTATOR_HEADER) {
        None => Ok(None),
        Some(v) => {
            let id = v.to_str().map_err(|_| ApiError::bad_request("invalid_annotator", "annotator id is not ASCII"))?.trim();
            if id.is_empty() {
                return Err(ApiError::bad_request("invalid_annotator", "annotator id is empty"));
            }
            Ok(Some(id.to_string()))
        }
    }
}

/// All records, superseded ones included; narrowed to one annotator when the header is present.
async fn list_annotations(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<Json<serde_json::Value>> {
    let s = state.session(&id)?;
    let who = annotator(&headers)?;
    let snap = s.snapshot();
    let records: Vec<_> = snap.records.iter().filter(|r| who.as_deref().is_none_or(|w| r.annotator_id == w)).collect();
    Ok(Json(json!({"session_id": id, "records": records, "done": snap.done, "roster": snap.roster()})))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PostBody {
    Span(#[allow(dead_code)] StrictSpan),
    Done(DoneBody),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrictSpan {
    start: i64,
    end: i64,
    level: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DoneBody {
    done: bool,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

async fn post_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let who = annotator(&headers)?
        .ok_or_else(|| ApiError::bad_request("missing_annotator", format!("header {ANNOTATOR_HEADER} is required")))?;
    let parsed: PostBody = serde_json::from_slice(&body).map_err(|_| {
        ApiError::bad_request("invalid_body", "expected {\"start\", \"end\", \"level\"} or {\"done\": true}")
    })?;
    let span = match parsed {
        PostBody::Done(DoneBody { done: false }) => return Err(ApiError::bad_request("invalid_body", "done must be true")),
        PostBody::Done(_) => None,
        PostBody::Span(StrictSpan { start, end, level }) => {
            let span = SpanBody { start, end, level };
            store::validate_span(&span).map_err(|e| ApiError::bad_request("invalid_span", e.to_string()))?;
            Some(span)
        }
    };

    let mut log = s.log.clone().lock_owned().await;
    let session = s.clone();
    let result = tokio::task::spawn_blocking(move || {
        let now = now_ms();
        let out = match span {
            Some(span) => log.annotate(&id, &who, span, now),
            None => log.mark_done(&id, &who, now).map(|r| (r, Vec::new())),
        };
        *session.snapshot.write().expect("snapshot lock") = Arc::new(log.state().clone());
        out
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;

    match result {
        Ok((record_id, superseded)) => {
            Ok((StatusCode::CREATED, Json(json!({"record_id": record_id, "superseded": superseded}))).into_response())
        }
        Err(StoreError::InvalidSpan(m)) => Err(ApiError::bad_request("invalid_span", m)),
        Err(StoreError::EmptyAnnotator) => Err(ApiError::bad_request("invalid_annotator", "annotator id is empty")),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

/// 409 with the provisional timeline as `detail` when fewer than two annotators count.
async fn fused(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = state.session(&id)?;
    let timeline = s.fused();
    let mut v = serde_json::to_value(&timeline).map_err(|e| ApiError::internal(e.to_string()))?;
    v["session_id"] = json!(id);
    if !timeline.sufficient {
        let mut err = ApiError::new(
            StatusCode::CONFLICT,
            "insufficient_annotators",
            format!("fusion needs at least 2 annotators, have {}", timeline.roster.len()),
        );
        err.detail = Some(v);
        return Err(err);
    }
    Ok(Json(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("bytes=0-9", 100), Some(Ok((0, 9))));
        assert_eq!(parse_range("bytes=90-", 100), Some(Ok((90, 99))));
        assert_eq!(parse_range("bytes=-10", 100), Some(Ok((90, 99))));
        assert_eq!(parse_range("bytes=-500", 100), Some(Ok((0, 99))));
        assert_eq!(parse_range("bytes=50-500", 100), Some(Ok((50, 99))));
        assert_eq!(parse_range("bytes=100-", 100), Some(Err(())));
        assert_eq!(parse_range("bytes=-0", 100), Some(Err(())));
        assert_eq!(parse_range("bytes=5-1", 100), None);
        assert_eq!(parse_range("bytes=0-1,4-5", 100), None);
        assert_eq!(parse_range("items=0-1", 100), None);
    }

    #[test]
    fn energy_per_frame() {
        let clock = FrameClock::new(0, 10.0, 3).unwrap();
        let samples: Vec<f64> = (0..30).map(|i| if i < 10 { 0.5 } else if i < 20 { -1.0 } else { 0.0 }).collect();
        assert_eq!(frame_energy(&samples, 100, &clock), vec![0.5, 1.0, 0.0]);
        assert_eq!(frame_energy(&samples[..15], 100, &clock), vec![0.5, 1.0, 0.0]);
    }

    #[test]
    fn session_ids() {
        assert!(valid_session_id("s-01_a.b"));
        assert!(!valid_session_id("../x"));
        assert!(!valid_session_id(".."));
        assert!(!valid_session_id(""));
    }
}
