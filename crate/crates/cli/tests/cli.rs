//! The `poselab` binary run end to end on a synthetic session.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use poselab_cli::fixture::FixtureTruth;
use poselab_core::io::{load_json, save_pixel_keypoints};
use poselab_core::labelgen::{ExportIndex, ProjectManifest};
use poselab_core::synth::evaluate;
use poselab_core::{PoseEstimate, RigidTransform};
use serde_json::Value;

fn poselab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poselab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("POSELAB_PROJECT")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> Value {
    let out = poselab(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fails(cwd: &Path, args: &[&str]) -> (i32, Value) {
    let out = poselab(cwd, args);
    let code = out.status.code().unwrap();
    assert_ne!(code, 0, "{args:?} succeeded");
    assert!(out.stdout.is_empty());
    (code, serde_json::from_slice(&out.stderr).unwrap())
}

/// Runs every step that only depends on the fixture inputs.
fn build(root: &Path) {
    ok(
        root,
        &[
            "init",
            "project",
            "--model",
            "fx/model/mesh.ply",
            "--keypoints",
            "fx/model/keypoints.txt",
            "--intrinsics",
            "fx/intrinsics.json",
            "--board",
            "5x7:0.03",
        ],
    );
    let p = root.join("project");
    ok(&p, &["import-frames", "s0", "../fx/frames", "--corners", "../fx/corners"]);
    let mut notes: Vec<_> = fs::read_dir(root.join("fx/annotations")).unwrap().map(|e| e.unwrap().path()).collect();
    notes.sort();
    for n in notes {
        let frame = n.file_stem().unwrap().to_str().unwrap();
        ok(&p, &["annotate", frame, n.to_str().unwrap()]);
    }
    ok(&p, &["triangulate", "s0"]);
    ok(&p, &["solve-object", "s0"]);
    ok(&p, &["label", "s0"]);
}

#[test]
fn synthetic_session_closes_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let v = ok(root, &["synth", "session", "--out", "fx", "--corner-noise-px", "0", "--seed", "5"]);
    assert_eq!(v["frames"], 300);
    let truth: FixtureTruth = load_json(&root.join("fx/truth.json")).unwrap();
    assert_eq!(truth.annotated.len(), 5);

    build(root);
    let p = root.join("project");
    let m: ProjectManifest = load_json(&p.join("project.json")).unwrap();
    let s = &m.sessions[0];
    assert_eq!(s.frames.len(), 300);
    assert_eq!(s.triangulated.len(), 6);
    let e = evaluate(s.object_pose_in_marker.as_ref().unwrap(), &truth.object_pose_in_marker);
    assert!(e.position_error < 1e-9 && e.geodesic_angle < 1e-6, "{e:?}");

    let mut worst: f64 = 0.0;
    for (f, t) in s.frames.iter().zip(&truth.frames) {
        assert_eq!(f.frame_id, t.frame_id);
        let labels = f.labels.as_ref().unwrap();
        assert!(labels.valid);
        let by_id: HashMap<_, _> = labels.keypoints.iter().map(|k| (k.keypoint_id.as_str(), k.pixel)).collect();
        assert_eq!(by_id.len(), t.keypoints.len());
        for k in &t.keypoints {
            worst = worst.max(by_id[k.keypoint_id.as_str()].distance(&k.pixel));
        }
    }
    assert!(worst < 1e-6, "worst label error {worst} px");

    let v = ok(&p, &["export", "--ratio", "1:0", "--out", "../export"]);
    assert_eq!(v["counts"]["real"], 300);
    let index: ExportIndex = load_json(&root.join("export/index.json")).unwrap();
    assert_eq!(index.items.len(), 300);
    for item in index.items.iter().take(5) {
        assert!(root.join("export").join(&item.image).is_file());
        assert!(root.join("export").join(&item.label).is_file());
    }

    // Re-running the whole pipeline on the same inputs changes nothing.
    let before = fs::read(p.join("project.json")).unwrap();
    build(root);
    assert_eq!(fs::read(p.join("project.json")).unwrap(), before);

    // A fixture frame through the PnP branch.
    let f = &truth.frames[123];
    save_pixel_keypoints(&root.join("kps.txt"), &f.keypoints).unwrap();
    let v = ok(&p, &["estimate", "--image-keypoints", "../kps.txt", "--branch", "pnp"]);
    assert_eq!(v["schema_version"], 1);
    let est: PoseEstimate = serde_json::from_value(v).unwrap();
    let expected: RigidTransform = f.camera_pose_in_marker.invert().compose(&truth.object_pose_in_marker);
    let e = evaluate(&est.pose, &expected);
    assert!(e.position_error < 1e-6 && e.geodesic_angle < 1e-4, "{e:?}");
}

#[test]
fn randomize_writes_composites() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["synth", "session", "--out", "fx", "--frames", "12", "--annotated", "4", "--seed", "2"]);
    build(root);
    let bg = root.join("bg");
    fs::create_dir_all(&bg).unwrap();
    image::RgbImage::from_pixel(320, 240, image::Rgb([20, 160, 40])).save(bg.join("a.png")).unwrap();
    image::RgbImage::from_pixel(800, 600, image::Rgb([200, 40, 40])).save(bg.join("b.png")).unwrap();
    fs::write(root.join("dr.json"), r#"{ "n_samples": 6, "background_dir": "bg", "seed": 3 }"#).unwrap();
    let p = root.join("project");
    let v = ok(&p, &["randomize", "--config", "../dr.json"]);
    assert_eq!(v["samples"], 6);
    assert_eq!(v["patches"], 12);
    let m: ProjectManifest = load_json(&p.join("project.json")).unwrap();
    assert_eq!(m.randomized.len(), 6);
    for r in &m.randomized {
        let img = image::open(p.join(&r.image)).unwrap();
        assert_eq!((img.width(), img.height()), (r.width, r.height));
    }
    let before = fs::read(p.join("project.json")).unwrap();
    ok(&p, &["randomize", "--config", "../dr.json"]);
    assert_eq!(fs::read(p.join("project.json")).unwrap(), before);

    let v = ok(&p, &["export", "--out", "../export", "--target", "10"]);
    assert_eq!(v["counts"]["real"], 5);
    assert_eq!(v["counts"]["dr"], 5);
}

#[test]
fn synthetic_scene_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let v = ok(root, &["synth", "scene", "--out", "scene", "--frames", "3", "--seed", "9"]);
    assert_eq!(v["frames"], 3);
    let scene: Value = load_json(&root.join("scene/scene.json")).unwrap();
    let truth = &scene["frames"][0]["camera_from_object"];
    fs::write(root.join("truth.json"), truth.to_string()).unwrap();

    let kps: Vec<poselab_core::AnnotatedKeypoint> =
        serde_json::from_value(scene["frames"][0]["keypoints"].clone()).unwrap();
    save_pixel_keypoints(&root.join("kps.txt"), &kps).unwrap();
    let est = ok(
        root,
        &[
            "estimate",
            "--image-keypoints",
            "kps.txt",
            "--branch",
            "pnp",
            "--model",
            "scene/mesh.ply",
            "--model-keypoints",
            "scene/keypoints.txt",
            "--intrinsics",
            "scene/intrinsics.json",
        ],
    );
    fs::write(root.join("est.json"), est.to_string()).unwrap();
    let e = ok(root, &["eval", "--estimate", "est.json", "--truth", "truth.json"]);
    assert!(e["position_error"].as_f64().unwrap() < 1e-6, "{e}");

    let map = serde_json::json!({ scene["frames"][0]["frame_id"].as_str().unwrap(): est });
    fs::write(root.join("map.json"), map.to_string()).unwrap();
    let r = ok(root, &["eval", "--scene", "scene", "--estimates", "map.json"]);
    assert_eq!(r["failures"], 2);
    assert!(r["median_position_error"].as_f64().unwrap() < 1e-6);
}

#[test]
fn errors_are_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let (code, v) = fails(root, &["frobnicate"]);
    assert_eq!((code, v["error"]["name"].as_str()), (1, Some("Usage")));
    let (code, _) = fails(
        root,
        &["init", "x", "--model", "m.ply", "--keypoints", "k.txt", "--intrinsics", "i.json", "--board", "7by5"],
    );
    assert_eq!(code, 1);

    let (code, v) = fails(root, &["triangulate", "s0"]);
    assert_eq!((code, v["error"]["name"].as_str()), (2, Some("NotFound")));
    assert_eq!(v["schema_version"], 1);

    ok(root, &["synth", "session", "--out", "fx", "--frames", "4", "--annotated", "2"]);
    ok(
        root,
        &[
            "init",
            "project",
            "--model",
            "fx/model/mesh.ply",
            "--keypoints",
            "fx/model/keypoints.txt",
            "--intrinsics",
            "fx/intrinsics.json",
            "--board",
            "5x7:0.03",
        ],
    );
    let p = root.join("project");
    ok(&p, &["import-frames", "s0", "../fx/frames", "--corners", "../fx/corners"]);

    // Geometric failure: nothing annotated yet.
    let (code, v) = fails(&p, &["triangulate", "s0"]);
    assert_eq!((code, v["error"]["name"].as_str()), (3, Some("NoTriangulableKeypoints")));

    fs::write(root.join("bad.txt"), "kp77 1 2\n").unwrap();
    let (code, v) = fails(&p, &["annotate", "frame_00000", "../bad.txt"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["field"], "keypoints[0].keypoint_id");

    let (code, v) = fails(&p, &["estimate", "--image-keypoints", "../missing.txt", "--branch", "pnp"]);
    assert_eq!((code, v["error"]["name"].as_str()), (4, Some("Io")));

    // A different project in the same directory is refused.
    let (code, v) = fails(
        root,
        &[
            "init",
            "project",
            "--model",
            "fx/model/mesh.ply",
            "--keypoints",
            "fx/model/keypoints.txt",
            "--intrinsics",
            "fx/intrinsics.json",
            "--board",
            "6x7:0.03",
        ],
    );
    assert_eq!((code, v["error"]["name"].as_str()), (2, Some("Conflict")));
}
