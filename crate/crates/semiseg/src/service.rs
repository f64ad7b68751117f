//! REST service over the annotation store.
//!
//! Readers clone an `Arc` snapshot of the store and never wait on a
//! writer for longer than the pointer swap. Mutations are serialized by
//! the writer lock: each one is applied to a copy, the audit entry and the
//! materialized annotations are persisted, and only then is the copy
//! published. A rejected mutation leaves both memory and disk untouched.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use semiseg_core::annotation::{AnchorBudget, AnnotationError, AnnotationSource, AnnotationStore, AuditEntry};
use semiseg_core::tracking::{Track, TrackStatus};
use semiseg_core::ClassLabel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::formats::{self, SampleStore};
use crate::render::{render_png, Channel};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

/// Where the service persists operator decisions.
#[derive(Clone, Debug)]
pub struct Persistence {
    pub audit: PathBuf,
    pub annotations: PathBuf,
}

pub struct Service {
    snapshot: RwLock<Arc<AnnotationStore>>,
    writer: Mutex<()>,
    samples: SampleStore,
    predictions: Vec<(u32, Vec<f64>)>,
    budget: AnchorBudget,
    persistence: Option<Persistence>,
    clock: Clock,
}

impl Service {
    /// `predictions` are per-sample class probabilities used to propose
    /// anchors; pass an empty list when no trained model is available.
    pub fn new(
        store: AnnotationStore,
        samples: SampleStore,
        predictions: Vec<(u32, Vec<f64>)>,
        budget: AnchorBudget,
        persistence: Option<Persistence>,
        clock: Clock,
    ) -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(store)),
            writer: Mutex::new(()),
            samples,
            predictions,
            budget,
            persistence,
            clock,
        }
    }

    /// Loads tracks and replays an existing audit log.
    pub fn load_store(tracks: &Path, audit: &Path) -> crate::Result<AnnotationStore> {
        let tracks: Vec<Track> = formats::read_jsonl(tracks)?;
        let log: Vec<AuditEntry> = if audit.exists() { formats::read_jsonl(audit)? } else { Vec::new() };
        Ok(AnnotationStore::replay(tracks, &log)?)
    }

    pub fn snapshot(&self) -> Arc<AnnotationStore> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut AnnotationStore, u64) -> Result<T, AnnotationError>) -> Result<T, ApiError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let before = next.audit_log().len();
        let out = f(&mut next, (self.clock)()).map_err(ApiError::from)?;
        if let Some(p) = &self.persistence {
            for entry in &next.audit_log()[before..] {
                formats::append_jsonl(&p.audit, entry).map_err(ApiError::internal)?;
            }
            let records: Vec<_> = next.records().copied().collect();
            write_atomic(&p.annotations, &records).map_err(ApiError::internal)?;
        }
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(out)
    }
}

fn write_atomic<T: Serialize>(path: &Path, items: &[T]) -> crate::Result<()> {
    let tmp = path.with_extension("tmp");
    formats::write_jsonl(&tmp, items)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    fn internal(e: Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match e {
            AnnotationError::UnknownTrack(_) => StatusCode::NOT_FOUND,
            AnnotationError::AlreadyDecided(_) | AnnotationError::AnchorConflict(_) => StatusCode::CONFLICT,
            AnnotationError::IndexOutOfRange { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotationError::Replay { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let kind = match status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::UNPROCESSABLE_ENTITY => "invalid",
            _ => "internal",
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.kind, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/tracks", get(list_tracks))
        .route("/api/tracks/{id}", get(get_track))
        .route("/api/tracks/{id}/label", post(label_track))
        .route("/api/tracks/{id}/truncate", post(truncate_track))
        .route("/api/tracks/{id}/discard", post(discard_track))
        .route("/api/samples/{id}/render", get(render_sample))
        .route("/api/anchors/candidates", get(anchor_candidates))
        .route("/api/anchors/{sample_id}/confirm", post(confirm_anchor))
        .route("/api/progress", get(progress))
        .with_state(service)
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let raw = if bytes.is_empty() { &b"{}"[..] } else { bytes };
    serde_json::from_slice(raw).map_err(|e| ApiError::invalid(e.to_string()))
}

/// Accepts a class name or its 1-based id.
fn parse_label(v: &Value) -> ApiResult<ClassLabel> {
    let label = match v {
        Value::String(s) => s.parse().ok(),
        Value::Number(n) => n.as_u64().and_then(|id| u8::try_from(id).ok()).and_then(ClassLabel::from_id),
        _ => None,
    };
    label.ok_or_else(|| ApiError::invalid(format!("invalid label {v}")))
}

fn status_name(s: &TrackStatus) -> &'static str {
    match s {
        TrackStatus::Pending => "pending",
        TrackStatus::Truncated { .. } => "truncated",
        TrackStatus::Confirmed { .. } => "confirmed",
        TrackStatus::Discarded => "discarded",
    }
}

fn thumbnail(track: &Track) -> Option<String> {
    track
        .surviving()
        .iter()
        .find_map(|m| m.sample_id)
        .map(|id| format!("/api/samples/{id}/render?channel=composite"))
}

fn track_view(track: &Track) -> Value {
    let sample_ids: Vec<u32> = track.members.iter().filter_map(|m| m.sample_id).collect();
    json!({
        "track_id": track.track_id,
        "status": track.status,
        "length": track.len(),
        "surviving": track.surviving().len(),
        "members": track.members,
        "sample_ids": sample_ids,
    })
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
    #[serde(default)]
    page: usize,
    page_size: Option<usize>,
}

const DEFAULT_PAGE_SIZE: usize = 50;

async fn list_tracks(State(svc): State<Arc<Service>>, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    if let Some(s) = &q.status {
        if !["pending", "truncated", "confirmed", "discarded"].contains(&s.as_str()) {
            return Err(ApiError::invalid(format!("unknown status {s:?}")));
        }
    }
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE).max(1);
    let store = svc.snapshot();
    let matching: Vec<&Track> =
        store.tracks().filter(|t| q.status.as_deref().is_none_or(|s| s == status_name(&t.status))).collect();
    let tracks: Vec<Value> = matching
        .iter()
        .skip(q.page.saturating_mul(page_size))
        .take(page_size)
        .map(|t| {
            json!({
                "track_id": t.track_id,
                "status": t.status,
                "length": t.len(),
                "samples": t.members.iter().filter(|m| m.sample_id.is_some()).count(),
                "thumbnail": thumbnail(t),
            })
        })
        .collect();
    Ok(Json(json!({ "total": matching.len(), "page": q.page, "page_size": page_size, "tracks": tracks })))
}

async fn get_track(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<u32>) -> ApiResult<Json<Value>> {
    let store = svc.snapshot();
    let track = store.track(id).ok_or_else(|| ApiError::not_found(format!("unknown track {id}")))?;
    Ok(Json(track_view(track)))
}

#[derive(Deserialize)]
struct LabelBody {
    label: Value,
}

async fn label_track(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<u32>, raw: Bytes) -> ApiResult<Json<Value>> {
    let b: LabelBody = body(&raw)?;
    let label = parse_label(&b.label)?;
    let records = svc.mutate(|s, now| s.apply_track_label(id, label, now))?;
    let store = svc.snapshot();
    let mut view = track_view(store.track(id).ok_or_else(|| ApiError::not_found("track vanished"))?);
    view["records"] = json!(records);
    Ok(Json(view))
}

#[derive(Deserialize)]
struct TruncateBody {
    at_index: usize,
}

async fn truncate_track(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<u32>, raw: Bytes) -> ApiResult<Json<Value>> {
    let b: TruncateBody = body(&raw)?;
    svc.mutate(|s, now| s.truncate_track(id, b.at_index, now))?;
    let store = svc.snapshot();
    Ok(Json(track_view(store.track(id).ok_or_else(|| ApiError::not_found("track vanished"))?)))
}

async fn discard_track(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<u32>) -> ApiResult<Json<Value>> {
    svc.mutate(|s, now| s.discard_track(id, now))?;
    let store = svc.snapshot();
    Ok(Json(track_view(store.track(id).ok_or_else(|| ApiError::not_found("track vanished"))?)))
}

#[derive(Deserialize)]
struct RenderQuery {
    channel: Option<String>,
}

async fn render_sample(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<u32>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let channel: Channel = q.channel.as_deref().unwrap_or("composite").parse().map_err(ApiError::invalid)?;
    let sample = svc
        .samples
        .read(id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found(format!("unknown sample {id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], render_png(&sample, channel)).into_response())
}

async fn anchor_candidates(State(svc): State<Arc<Service>>) -> Json<Value> {
    let store = svc.snapshot();
    let preds: Vec<(u32, &[f64])> = svc.predictions.iter().map(|(id, p)| (*id, p.as_slice())).collect();
    let candidates = store.anchor_candidates(&preds, &svc.budget);
    let classes: Vec<Value> = ClassLabel::ALL
        .iter()
        .map(|&c| {
            let confirmed =
                store.records().filter(|r| r.source == AnnotationSource::Anchor && r.label == c).count();
            let list: Vec<_> = candidates.iter().filter(|a| a.predicted == c).collect();
            json!({
                "class": c,
                "budget": svc.budget.for_class(c),
                "confirmed": confirmed,
                "candidates": list,
            })
        })
        .collect();
    Json(json!({ "available": !svc.predictions.is_empty(), "classes": classes }))
}

#[derive(Deserialize)]
struct ConfirmBody {
    label: Value,
    #[serde(default, rename = "override")]
    overrides: bool,
}

async fn confirm_anchor(
    State(svc): State<Arc<Service>>,
    UrlPath(sample_id): UrlPath<u32>,
    raw: Bytes,
) -> ApiResult<Json<Value>> {
    let b: ConfirmBody = body(&raw)?;
    let label = parse_label(&b.label)?;
    if svc.samples.entry(sample_id).is_none() {
        return Err(ApiError::not_found(format!("unknown sample {sample_id}")));
    }
    let record = svc.mutate(|s, now| s.confirm_anchor(sample_id, label, b.overrides, now))?;
    Ok(Json(json!(record)))
}

async fn progress(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(json!(svc.snapshot().progress()))
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(service: Arc<Service>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
