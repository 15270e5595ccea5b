//! HTTP API driven in-process.

use std::path::Path;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use poselab_cli::commands::{import_frames, init, InitArgs};
use poselab_cli::fixture::{write_session_fixture, FixtureConfig, FixtureTruth};
use poselab_cli::server::router;
use poselab_cli::store::ProjectStore;
use poselab_core::io::load_json;
use poselab_core::synth::{evaluate, SessionConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    store: ProjectStore,
    truth: FixtureTruth,
}

fn project(n_frames: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fixture");
    let cfg = FixtureConfig {
        session: SessionConfig { n_frames, corner_noise_px: 0.0, seed: 11, ..SessionConfig::default() },
        ..FixtureConfig::default()
    };
    let layout = write_session_fixture(&fx, &cfg).unwrap();
    let root = dir.path().join("project");
    init(&InitArgs {
        dir: &root,
        mesh: &fx.join(&layout.mesh),
        keypoints: &fx.join(&layout.keypoints),
        intrinsics: &fx.join(&layout.intrinsics),
        board: layout.board.parse().unwrap(),
        project_id: None,
    })
    .unwrap();
    let store = ProjectStore::open(&root).unwrap();
    import_frames(&store, "s0", &fx.join("frames"), Some(&fx.join("corners"))).unwrap();
    let truth = load_json(&fx.join("truth.json")).unwrap();
    Fixture { _dir: dir, store, truth }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

fn clicks(truth: &FixtureTruth, frame: &str, ids: &[&str]) -> Value {
    let f = truth.frames.iter().find(|f| f.frame_id == frame).unwrap();
    let kps: Vec<Value> = f
        .keypoints
        .iter()
        .filter(|k| ids.contains(&k.keypoint_id.as_str()))
        .map(|k| json!({ "keypoint_id": k.keypoint_id, "pixel": { "u": k.pixel.u, "v": k.pixel.v } }))
        .collect();
    json!({ "keypoints": kps })
}

fn manifest_bytes(store: &ProjectStore) -> Vec<u8> {
    std::fs::read(store.manifest_path()).unwrap()
}

#[tokio::test]
async fn unknown_keypoint_is_rejected_with_its_field_path() {
    let fx = project(6);
    let app = router(fx.store.clone());
    let before = manifest_bytes(&fx.store);
    let body = json!({
        "keypoints": [
            { "keypoint_id": "kp00", "pixel": { "u": 10.0, "v": 20.0 } },
            { "keypoint_id": "kp99", "pixel": { "u": 30.0, "v": 40.0 } },
        ]
    });
    let (status, v) = call(&app, "PUT", "/api/frames/frame_00000/annotations", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["error"]["name"], "InvalidInput");
    assert_eq!(v["error"]["field"], "keypoints[1].keypoint_id");
    assert_eq!(manifest_bytes(&fx.store), before);

    let (status, v) = call(&app, "PUT", "/api/frames/frame_00000/annotations", Some(json!({"pixels": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "body");

    let (status, v) = call(&app, "GET", "/api/frames/nope/annotations", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["name"], "NotFound");
}

#[tokio::test]
async fn stale_revision_is_a_conflict() {
    let fx = project(6);
    let app = router(fx.store.clone());
    let (_, v) = call(&app, "GET", "/api/frames/frame_00001/annotations", None).await;
    let rev = v["revision"].as_str().unwrap().to_string();
    assert_eq!(v["keypoints"], json!([]));

    let mut body = clicks(&fx.truth, "frame_00001", &["kp00", "kp01"]);
    body["revision"] = json!(rev);
    let (status, v) = call(&app, "PUT", "/api/frames/frame_00001/annotations", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_ne!(v["revision"], json!(rev));

    // Same edit based on the old revision.
    let (status, v) = call(&app, "PUT", "/api/frames/frame_00001/annotations", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["name"], "Conflict");
}

#[tokio::test]
async fn keypoint_seen_once_is_skipped() {
    let fx = project(6);
    let app = router(fx.store.clone());
    let (status, v) = call(&app, "POST", "/api/sessions/s0/triangulate", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["name"], "NoTriangulableKeypoints");

    for f in ["frame_00000", "frame_00002"] {
        let body = clicks(&fx.truth, f, &["kp00", "kp01", "kp02", "kp03"]);
        let (status, _) = call(&app, "PUT", &format!("/api/frames/{f}/annotations"), Some(body)).await;
        assert_eq!(status, StatusCode::OK);
    }
    let body = clicks(&fx.truth, "frame_00004", &["kp08"]);
    call(&app, "PUT", "/api/frames/frame_00004/annotations", Some(body)).await;

    let (status, v) = call(&app, "POST", "/api/sessions/s0/triangulate", None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["keypoints"].as_array().unwrap().len(), 4);
    assert_eq!(v["skipped"], json!([{ "keypoint_id": "kp08", "observations": 1 }]));
    for k in v["keypoints"].as_array().unwrap() {
        assert!(k["residual_rms"].as_f64().unwrap() < 1e-9);
    }
}

#[tokio::test]
async fn annotating_five_frames_recovers_the_object_pose() {
    let fx = project(30);
    let app = router(fx.store.clone());
    let (status, v) = call(&app, "GET", "/api/project", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["keypoints"].as_array().unwrap().len(), 20);
    assert_eq!(v["sessions"][0]["frames"].as_array().unwrap().len(), 30);

    let (status, _) = call(&app, "GET", "/api/frames/frame_00000/overlay", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let six = ["kp00", "kp01", "kp02", "kp03", "kp04", "kp05"];
    for i in [0, 6, 12, 18, 24] {
        let f = format!("frame_{i:05}");
        let (status, v) =
            call(&app, "PUT", &format!("/api/frames/{f}/annotations"), Some(clicks(&fx.truth, &f, &six))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }
    let (status, v) = call(&app, "POST", "/api/sessions/s0/triangulate", None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["keypoints"].as_array().unwrap().len(), 6);

    let (status, v) = call(&app, "POST", "/api/sessions/s0/solve", None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let pose = serde_json::from_value(v["object_pose_in_marker"].clone()).unwrap();
    let e = evaluate(&pose, &fx.truth.object_pose_in_marker);
    assert!(e.position_error < 1e-6, "{e:?}");
    assert!(e.geodesic_angle < 1e-4, "{e:?}");
    assert!(v["rmsd"].as_f64().unwrap() < 1e-6);

    let (status, v) = call(&app, "GET", "/api/frames/frame_00007/overlay", None).await;
    assert_eq!(status, StatusCode::OK);
    let truth = &fx.truth.frames[7];
    for (l, t) in v["keypoints"].as_array().unwrap().iter().zip(&truth.keypoints) {
        assert_eq!(l["keypoint_id"], json!(t.keypoint_id));
        let du = l["pixel"]["u"].as_f64().unwrap() - t.pixel.u;
        let dv = l["pixel"]["v"].as_f64().unwrap() - t.pixel.v;
        assert!(du.hypot(dv) < 1e-4);
    }
}

#[tokio::test]
async fn image_and_background_jobs() {
    let fx = project(6);
    let app = router(fx.store.clone());
    let res =
        app.clone().oneshot(Request::get("/api/frames/frame_00003/image").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()[header::CONTENT_TYPE], "image/png");
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let img = image::load_from_memory(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (640, 480));

    let out = fx.store.root().join("export");
    let (status, v) = call(&app, "POST", "/api/jobs/export", Some(json!({ "out": out }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = v["job"].as_u64().unwrap();
    let done = poll(&app, id).await;
    // Nothing is labeled yet, so the set is empty.
    assert_eq!(done["state"], "succeeded", "{done}");
    assert_eq!(done["result"]["counts"]["real"], 0);

    let (status, v) = call(&app, "POST", "/api/jobs/randomize", Some(json!({ "n_samples": 2 }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = poll(&app, v["job"].as_u64().unwrap()).await;
    assert_eq!(done["state"], "failed");
    assert_eq!(done["error"]["field"], "background_dir");

    let (status, _) = call(&app, "GET", "/api/jobs/999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

async fn poll(app: &Router, id: u64) -> Value {
    for _ in 0..500 {
        let (status, v) = call(app, "GET", &format!("/api/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if v["state"] != "running" {
            return v;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

#[test]
fn writes_never_persist_an_invalid_manifest() {
    let fx = project(6);
    let before = manifest_bytes(&fx.store);
    let err = fx
        .store
        .update(None, |m, _| {
            m.board.rows = 1;
            Ok(())
        })
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(manifest_bytes(&fx.store), before);
    assert!(Path::new(&fx.store.manifest_path()).is_file());
}
