//! JSON-over-HTTP API for the browser annotator.
//!
//! Reads go straight to disk. Writes are serialized through one async mutex
//! and then through the store's file lock, so a CLI run against the same
//! project gets a conflict rather than a torn manifest. Randomize and export
//! run as background jobs, one at a time.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use poselab_core::labelgen::{label_frame, DrConfig, MixRatio};
use poselab_core::{AnnotatedKeypoint, AnnotationSet, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands;
use crate::error::{Class, CliError, CliResult};
use crate::store::ProjectStore;

impl IntoResponse for CliError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.to_json())).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: u64,
    pub kind: &'static str,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    all: BTreeMap<u64, Job>,
}

impl Jobs {
    fn busy(&self) -> bool {
        self.all.values().any(|j| j.state == JobState::Running)
    }
}

pub struct AppState {
    store: ProjectStore,
    writer: tokio::sync::Mutex<()>,
    jobs: Mutex<Jobs>,
}

type Shared = Arc<AppState>;

pub fn router(store: ProjectStore) -> Router {
    let state = Arc::new(AppState { store, writer: tokio::sync::Mutex::new(()), jobs: Mutex::new(Jobs::default()) });
    Router::new()
        .route("/api/project", get(project))
        .route("/api/frames/{id}/image", get(frame_image))
        .route("/api/frames/{id}/annotations", get(get_annotations).put(put_annotations))
        .route("/api/frames/{id}/overlay", get(overlay))
        .route("/api/sessions/{id}/triangulate", post(triangulate))
        .route("/api/sessions/{id}/solve", post(solve))
        .route("/api/jobs/randomize", post(start_randomize))
        .route("/api/jobs/export", post(start_export))
        .route("/api/jobs/{id}", get(job))
        .with_state(state)
}

pub async fn serve(store: ProjectStore, addr: SocketAddr) -> CliResult<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("serving {} on http://{}", store.root().display(), listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs blocking store work under the writer mutex.
async fn write<T: Send + 'static>(
    st: &Shared,
    f: impl FnOnce(&ProjectStore) -> CliResult<T> + Send + 'static,
) -> CliResult<T> {
    let _guard = st.writer.lock().await;
    let store = st.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| CliError::new(Class::Io, "Internal", e.to_string()))?
}

async fn read<T: Send + 'static>(
    st: &Shared,
    f: impl FnOnce(&ProjectStore) -> CliResult<T> + Send + 'static,
) -> CliResult<T> {
    let store = st.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| CliError::new(Class::Io, "Internal", e.to_string()))?
}

async fn project(State(st): State<Shared>) -> CliResult<Json<Value>> {
    read(&st, |store| {
        let snap = store.load()?;
        let m = &snap.manifest;
        let model = store.model(m)?;
        let sessions: Vec<Value> = m
            .sessions
            .iter()
            .map(|s| {
                let frames: Vec<Value> = s
                    .frames
                    .iter()
                    .map(|f| {
                        json!({
                            "frame_id": f.frame_id,
                            "has_pose": f.camera_pose_in_marker.is_some(),
                            "board_residual_px": f.board_residual_px,
                            "annotated": f.annotations.as_ref().map_or(0, |a| a.keypoints.len()),
                            "labeled": f.labels.as_ref().map(|l| l.valid),
                        })
                    })
                    .collect();
                json!({
                    "id": s.id,
                    "solved": s.object_pose_in_marker.is_some(),
                    "object_rmsd": s.object_rmsd,
                    "triangulated": s.triangulated,
                    "frames": frames,
                })
            })
            .collect();
        Ok(Json(json!({
            "schema_version": SCHEMA_VERSION,
            "project_id": m.project_id,
            "revision": snap.revision,
            "intrinsics": m.intrinsics,
            "board": m.board,
            "keypoints": model.keypoint_ids().collect::<Vec<_>>(),
            "sessions": sessions,
            "randomized": m.randomized.len(),
        })))
    })
    .await
}

async fn frame_image(State(st): State<Shared>, Path(id): Path<String>) -> CliResult<Response> {
    let bytes = read(&st, move |store| {
        let snap = store.load()?;
        let (_, f) = snap.manifest.find_frame(&id)?;
        let path = store.resolve(&f.image);
        std::fs::read(&path).map_err(|e| poselab_core::Error::io(path, e).into())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_annotations(State(st): State<Shared>, Path(id): Path<String>) -> CliResult<Json<Value>> {
    read(&st, move |store| {
        let snap = store.load()?;
        let (_, f) = snap.manifest.find_frame(&id)?;
        let set = f.annotations.clone().unwrap_or_else(|| AnnotationSet::new(&id));
        Ok(Json(json!({
            "schema_version": SCHEMA_VERSION,
            "revision": snap.revision,
            "frame_id": set.frame_id,
            "keypoints": set.keypoints,
            "annotator": set.annotator,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationBody {
    #[serde(default)]
    schema_version: Option<u32>,
    #[serde(default)]
    frame_id: Option<String>,
    keypoints: Vec<AnnotatedKeypoint>,
    #[serde(default)]
    annotator: Option<String>,
    /// Revision the edit was based on; `If-Match` takes precedence.
    #[serde(default)]
    revision: Option<String>,
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> CliResult<T> {
    serde_json::from_slice(body).map_err(|e| CliError::invalid("body", e.to_string()))
}

async fn put_annotations(
    State(st): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> CliResult<Json<Value>> {
    let b: AnnotationBody = parse_body(&body)?;
    if b.schema_version.is_some_and(|v| v != SCHEMA_VERSION) {
        return Err(CliError::invalid("schema_version", format!("expected {SCHEMA_VERSION}")));
    }
    if b.frame_id.as_ref().is_some_and(|f| *f != id) {
        return Err(CliError::invalid("frame_id", "does not match the URL"));
    }
    let expected = headers
        .get(header::IF_MATCH)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.trim_matches('"').to_string())
        .or(b.revision);
    let set = AnnotationSet { frame_id: id, keypoints: b.keypoints, annotator: b.annotator };
    let (set, rev) = write(&st, move |store| commands::set_annotations(store, set, expected.as_deref())).await?;
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "revision": rev,
        "frame_id": set.frame_id,
        "keypoints": set.keypoints,
        "annotator": set.annotator,
    })))
}

async fn triangulate(State(st): State<Shared>, Path(id): Path<String>) -> CliResult<Json<Value>> {
    let out = write(&st, move |store| commands::triangulate(store, &id)).await?;
    Ok(Json(serde_json::to_value(out).expect("plain struct")))
}

async fn solve(State(st): State<Shared>, Path(id): Path<String>) -> CliResult<Json<Value>> {
    let out = write(&st, move |store| commands::solve_object(store, &id)).await?;
    Ok(Json(serde_json::to_value(out).expect("plain struct")))
}

async fn overlay(State(st): State<Shared>, Path(id): Path<String>) -> CliResult<Json<Value>> {
    read(&st, move |store| {
        let snap = store.load()?;
        let m = &snap.manifest;
        let (s, f) = m.find_frame(&id)?;
        let marker_from_object =
            s.object_pose_in_marker.ok_or_else(|| poselab_core::Error::MissingObjectPose { session: s.id.clone() })?;
        let mfc =
            f.camera_pose_in_marker.ok_or_else(|| poselab_core::Error::MissingCameraPose { frame: id.clone() })?;
        let model = store.model(m)?;
        let labels = label_frame(&mfc.invert().compose(&marker_from_object), &model, &m.intrinsics);
        Ok(Json(json!({
            "schema_version": SCHEMA_VERSION,
            "frame_id": id,
            "session": s.id,
            "object_rmsd": s.object_rmsd,
            "valid": labels.valid,
            "keypoints": labels.keypoints,
            "bbox": labels.bbox,
            "bbox_clamped": labels.bbox_clamped,
        })))
    })
    .await
}

fn start_job(
    st: &Shared,
    kind: &'static str,
    f: impl FnOnce(&ProjectStore) -> CliResult<Value> + Send + 'static,
) -> CliResult<(StatusCode, Json<Value>)> {
    let id = {
        let mut jobs = st.jobs.lock().expect("job table");
        if jobs.busy() {
            return Err(CliError::conflict("another background job is running"));
        }
        jobs.next += 1;
        let id = jobs.next;
        jobs.all.insert(id, Job { id, kind, state: JobState::Running, result: None, error: None });
        id
    };
    let st2 = st.clone();
    tokio::spawn(async move {
        let outcome = write(&st2, f).await;
        let mut jobs = st2.jobs.lock().expect("job table");
        if let Some(j) = jobs.all.get_mut(&id) {
            match outcome {
                Ok(v) => {
                    j.state = JobState::Succeeded;
                    j.result = Some(v);
                }
                Err(e) => {
                    j.state = JobState::Failed;
                    j.error = Some(e.to_json()["error"].clone());
                }
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "schema_version": SCHEMA_VERSION, "job": id, "kind": kind }))))
}

async fn start_randomize(State(st): State<Shared>, body: Bytes) -> CliResult<(StatusCode, Json<Value>)> {
    let cfg: Option<DrConfig> = if body.is_empty() { None } else { Some(parse_body(&body)?) };
    start_job(&st, "randomize", move |store| {
        let cfg = match cfg {
            Some(c) => c,
            None => store.load()?.manifest.dr,
        };
        commands::randomize(store, cfg)
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportBody {
    out: PathBuf,
    #[serde(default)]
    ratio: Option<MixRatio>,
    #[serde(default)]
    target: Option<usize>,
}

async fn start_export(State(st): State<Shared>, body: Bytes) -> CliResult<(StatusCode, Json<Value>)> {
    let b: ExportBody = parse_body(&body)?;
    start_job(&st, "export", move |store| {
        let out = store.resolve(&b.out);
        commands::export(store, b.ratio, &out, b.target)
    })
}

async fn job(State(st): State<Shared>, Path(id): Path<u64>) -> CliResult<Json<Value>> {
    let jobs = st.jobs.lock().expect("job table");
    let j = jobs
        .all
        .get(&id)
        .ok_or_else(|| CliError::from(poselab_core::Error::NotFound { kind: "job", id: id.to_string() }))?;
    let mut v = serde_json::to_value(j).expect("plain struct");
    v["schema_version"] = json!(SCHEMA_VERSION);
    Ok(Json(v))
}
