//! Pipeline steps shared by the command line and the HTTP service. Each
//! returns the JSON document printed on success.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use poselab_core::io::{load_cloud, load_json, load_model, load_pixel_keypoints};
use poselab_core::labelgen::{
    camera_pose_from_board, camera_poses, domain_randomize, export_dataset, object_pose_in_marker, propagate_labels,
    segment_foreground, BoardSpec, DrConfig, DrRecord, ExportOptions, FrameRecord, LabeledPatch, MixRatio, ModelRef,
    ProjectManifest, Session,
};
use poselab_core::robust_pose::{estimate_from_cloud, icp_refine, pnp_ransac, Branch3dConfig, IcpConfig, RansacConfig};
use poselab_core::synth::{evaluate, evaluate_scene, generate_scene, SynthConfig, SynthScene};
use poselab_core::{
    triangulate_keypoints, AnnotatedKeypoint, AnnotationSet, CameraIntrinsics, ObjectModel, PoseEstimate,
    RigidTransform, TriangulationReport, SCHEMA_VERSION,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::fixture::{write_session_fixture, FixtureConfig};
use crate::store::{write_atomic, ProjectStore};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    poselab_core::Error::io(path, e).into()
}

/// Files directly inside `dir` with one of `exts`, sorted by name.
pub fn list_files(dir: &Path, exts: &[&str]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).unwrap_or_default();
        if path.is_file() && exts.contains(&ext.as_str()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::invalid("image", format!("{} has no usable file name", path.display())))
}

/// `path` relative to `root` when it lies inside it, absolute otherwise.
fn project_relative(root: &Path, path: &Path) -> CliResult<PathBuf> {
    let abs = path.canonicalize().map_err(|e| io_err(path, e))?;
    let root = root.canonicalize().map_err(|e| io_err(root, e))?;
    Ok(abs.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(abs))
}

/// Copies `src` into `dir` unless an identical file is already there.
fn install_file(src: &Path, dir: &Path) -> CliResult<PathBuf> {
    let name = src.file_name().ok_or_else(|| CliError::invalid("model", format!("{} is not a file", src.display())))?;
    let dst = dir.join(name);
    let bytes = fs::read(src).map_err(|e| io_err(src, e))?;
    if dst.exists() {
        let current = fs::read(&dst).map_err(|e| io_err(&dst, e))?;
        if current != bytes {
            return Err(CliError::conflict(format!("{} exists with different contents", dst.display())));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_atomic(&dst, &bytes)?;
    }
    Ok(dst)
}

pub struct InitArgs<'a> {
    pub dir: &'a Path,
    pub mesh: &'a Path,
    pub keypoints: &'a Path,
    pub intrinsics: &'a Path,
    pub board: BoardSpec,
    pub project_id: Option<String>,
}

/// Creates a project, copying the model files into `<dir>/model/`.
pub fn init(args: &InitArgs) -> CliResult<Value> {
    let intrinsics: CameraIntrinsics = load_json(args.intrinsics)?;
    // Parse before copying so a bad model leaves no trace.
    let model = load_model(args.mesh, args.keypoints)?;
    let model_dir = args.dir.join("model");
    let mesh = install_file(args.mesh, &model_dir)?;
    let keypoints = install_file(args.keypoints, &model_dir)?;
    let project_id = match &args.project_id {
        Some(id) => id.clone(),
        None => args
            .dir
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "project".into()),
    };
    let manifest = ProjectManifest::new(
        project_id,
        intrinsics,
        ModelRef {
            mesh: mesh.strip_prefix(args.dir).unwrap_or(&mesh).to_path_buf(),
            keypoints: keypoints.strip_prefix(args.dir).unwrap_or(&keypoints).to_path_buf(),
        },
        args.board,
    );
    let store = ProjectStore::create(args.dir, &manifest)?;
    let snap = store.load()?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "project_id": snap.manifest.project_id,
        "manifest": store.manifest_path(),
        "revision": snap.revision,
        "keypoints": model.keypoint_ids().collect::<Vec<_>>(),
    }))
}

#[derive(Debug, Default, Serialize)]
pub struct ImportReport {
    pub schema_version: u32,
    pub session: String,
    pub frames: usize,
    pub posed: usize,
    /// Frames whose board fit exceeds the residual threshold.
    pub high_residual: Vec<String>,
    /// Frames without a corner file.
    pub missing_corners: Vec<String>,
    /// Frames whose corners do not give a pose, with the reason.
    pub failed: Vec<(String, String)>,
    pub revision: String,
}

/// Registers every PNG in `image_dir` as a frame of `session`, frame id =
/// file stem. With `corners_dir`, `<stem>.txt` there gives the board corners.
///
/// Re-importing keeps annotations; labels are dropped when a pose changes.
pub fn import_frames(
    store: &ProjectStore,
    session: &str,
    image_dir: &Path,
    corners_dir: Option<&Path>,
) -> CliResult<ImportReport> {
    let images = list_files(image_dir, &["png"])?;
    if images.is_empty() {
        return Err(CliError::invalid("image_dir", format!("no PNG files in {}", image_dir.display())));
    }
    let snap = store.load()?;
    let (intr, board) = (snap.manifest.intrinsics, snap.manifest.board);
    let mut report = ImportReport {
        schema_version: SCHEMA_VERSION,
        session: session.to_string(),
        frames: images.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(images.len());
    for path in &images {
        let id = stem(path)?;
        let mut rec = FrameRecord::new(&id, project_relative(store.root(), path)?);
        if let Some(dir) = corners_dir {
            let cpath = dir.join(format!("{id}.txt"));
            if cpath.is_file() {
                let corners = poselab_core::io::load_corners(&cpath)?;
                match camera_pose_from_board(&corners, &board, &intr) {
                    Ok(p) => {
                        rec.camera_pose_in_marker = Some(p.camera_pose_in_marker);
                        rec.board_residual_px = Some(p.mean_reprojection_px);
                        report.posed += 1;
                        if p.high_residual {
                            report.high_residual.push(id.clone());
                        }
                    }
                    Err(e @ poselab_core::Error::InvalidInput { .. }) => return Err(e.into()),
                    Err(e) => report.failed.push((id.clone(), e.to_string())),
                }
            } else {
                report.missing_corners.push(id.clone());
            }
        }
        records.push(rec);
    }
    let ((), rev) = store.update(None, |m, _| {
        if m.sessions.iter().all(|s| s.id != session) {
            m.sessions.push(Session::new(session));
        }
        let s = m.session_mut(session)?;
        for rec in records {
            match s.frame_mut(&rec.frame_id) {
                Some(f) => {
                    if f.camera_pose_in_marker != rec.camera_pose_in_marker {
                        f.labels = None;
                    }
                    f.image = rec.image;
                    f.camera_pose_in_marker = rec.camera_pose_in_marker;
                    f.board_residual_px = rec.board_residual_px;
                }
                None => s.frames.push(rec),
            }
        }
        s.frames.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
        Ok(())
    })?;
    report.revision = rev;
    Ok(report)
}

/// Replaces the annotations of one frame. An empty set clears them.
pub fn set_annotations(
    store: &ProjectStore,
    set: AnnotationSet,
    expected: Option<&str>,
) -> CliResult<(AnnotationSet, String)> {
    store.update(expected, |m, model| {
        for (i, k) in set.keypoints.iter().enumerate() {
            if model.keypoint(&k.keypoint_id).is_none() {
                return Err(CliError::invalid(
                    format!("keypoints[{i}].keypoint_id"),
                    format!("unknown keypoint `{}`", k.keypoint_id),
                ));
            }
        }
        set.validate()?;
        let f = m.find_frame_mut(&set.frame_id)?;
        f.annotations = (!set.keypoints.is_empty()).then(|| set.clone());
        Ok(set)
    })
}

pub fn annotate(store: &ProjectStore, frame: &str, file: &Path, annotator: Option<String>) -> CliResult<Value> {
    let set = AnnotationSet { frame_id: frame.to_string(), keypoints: load_pixel_keypoints(file)?, annotator };
    let (set, rev) = set_annotations(store, set, None)?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "frame_id": set.frame_id,
        "keypoints": set.keypoints.len(),
        "revision": rev,
    }))
}

#[derive(Debug, Serialize)]
pub struct TriangulateOutput {
    pub schema_version: u32,
    pub session: String,
    #[serde(flatten)]
    pub report: TriangulationReport,
    pub revision: String,
}

/// Triangulates the stored annotations of a session and keeps the result.
pub fn triangulate(store: &ProjectStore, session: &str) -> CliResult<TriangulateOutput> {
    let (report, revision) = store.update(None, |m, _| {
        let intr = m.intrinsics;
        let s = m.session_mut(session)?;
        let report = triangulate_keypoints(&s.annotations(), &camera_poses(s), &intr)?;
        s.triangulated = report.keypoints.clone();
        Ok(report)
    })?;
    Ok(TriangulateOutput { schema_version: SCHEMA_VERSION, session: session.to_string(), report, revision })
}

#[derive(Debug, Serialize)]
pub struct SolveOutput {
    pub schema_version: u32,
    pub session: String,
    pub object_pose_in_marker: RigidTransform,
    pub rmsd: f64,
    pub keypoints: Vec<String>,
    pub revision: String,
}

/// Aligns the model keypoints to the triangulated ones.
pub fn solve_object(store: &ProjectStore, session: &str) -> CliResult<SolveOutput> {
    let ((pose, rmsd, keypoints), revision) = store.update(None, |m, model| {
        let s = m.session_mut(session)?;
        if s.triangulated.is_empty() {
            return Err(CliError::from(poselab_core::Error::NoTriangulableKeypoints));
        }
        let a = object_pose_in_marker(&s.triangulated, model)?;
        s.object_pose_in_marker = Some(a.transform);
        s.object_rmsd = Some(a.rmsd);
        let ids = s.triangulated.iter().map(|k| k.keypoint_id.clone()).collect();
        Ok((a.transform, a.rmsd, ids))
    })?;
    Ok(SolveOutput {
        schema_version: SCHEMA_VERSION,
        session: session.to_string(),
        object_pose_in_marker: pose,
        rmsd,
        keypoints,
        revision,
    })
}

/// Writes keypoint, visibility and box labels into every frame of a session.
pub fn label(store: &ProjectStore, session: &str) -> CliResult<Value> {
    let ((valid, invalid, clamped), rev) = store.update(None, |m, model| {
        let intr = m.intrinsics;
        let s = m.session_mut(session)?;
        s.frames = propagate_labels(s, model, &intr)?;
        let labels = || s.frames.iter().filter_map(|f| f.labels.as_ref());
        let valid = labels().filter(|l| l.valid).count();
        let clamped = labels().filter(|l| l.bbox_clamped).count();
        Ok((valid, s.frames.len() - valid, clamped))
    })?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "session": session,
        "valid": valid,
        "invalid": invalid,
        "bbox_clamped": clamped,
        "revision": rev,
    }))
}

fn labeled_patches(store: &ProjectStore, m: &ProjectManifest, model: &ObjectModel) -> CliResult<Vec<LabeledPatch>> {
    let mut patches = Vec::new();
    for s in &m.sessions {
        let Some(marker_from_object) = s.object_pose_in_marker else {
            continue;
        };
        for f in &s.frames {
            let (Some(mfc), Some(labels)) = (f.camera_pose_in_marker, &f.labels) else {
                continue;
            };
            if !labels.valid {
                continue;
            }
            let path = store.resolve(&f.image);
            let img = image::open(&path).map_err(|e| poselab_core::Error::Image { path, source: e })?.to_rgba8();
            let fg = segment_foreground(&img, &mfc.invert().compose(&marker_from_object), model, &m.intrinsics)?;
            if !fg.degenerate {
                patches.push(LabeledPatch::from_foreground(&f.frame_id, &fg, labels));
            }
        }
    }
    Ok(patches)
}

/// Composites labeled cut-outs onto the backgrounds named by `cfg` and
/// replaces the project's randomized set.
pub fn randomize(store: &ProjectStore, cfg: DrConfig) -> CliResult<Value> {
    cfg.validate()?;
    let bg_dir = cfg
        .background_dir
        .as_ref()
        .map(|d| store.resolve(d))
        .ok_or_else(|| CliError::invalid("background_dir", "required"))?;
    let bg_paths = list_files(&bg_dir, &["png"])?;
    if bg_paths.is_empty() {
        return Err(CliError::invalid("background_dir", format!("no PNG files in {}", bg_dir.display())));
    }
    let backgrounds = bg_paths
        .iter()
        .map(|p| {
            image::open(p)
                .map(|i| i.to_rgb8())
                .map_err(|e| poselab_core::Error::Image { path: p.clone(), source: e }.into())
        })
        .collect::<CliResult<Vec<_>>>()?;
    let out_dir = store.root().join("randomized");
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let ((samples, patches), rev) = store.update(None, |m, model| {
        let patches = labeled_patches(store, m, model)?;
        if patches.is_empty() {
            return Err(CliError::invalid("sessions", "no valid labeled frames to cut out"));
        }
        let mut records = Vec::with_capacity(cfg.n_samples);
        for c in domain_randomize(&patches, &backgrounds, &cfg)? {
            let rel = PathBuf::from("randomized").join(format!("dr_{:05}.png", c.sample.index));
            let path = store.root().join(&rel);
            let mut bytes = Vec::new();
            c.image
                .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|e| poselab_core::Error::Image { path: path.clone(), source: e })?;
            write_atomic(&path, &bytes)?;
            records.push(DrRecord {
                index: c.sample.index,
                image: rel,
                width: c.image.width(),
                height: c.image.height(),
                source_frame: patches[c.sample.patch].source_frame.clone(),
                background: project_relative(store.root(), &bg_paths[c.sample.background])?,
                similarity: c.sample.similarity,
                keypoints: c.sample.keypoints,
                bbox: c.sample.bbox,
            });
        }
        m.dr = cfg.clone();
        m.randomized = records;
        Ok((m.randomized.len(), patches.len()))
    })?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "samples": samples,
        "patches": patches,
        "backgrounds": backgrounds.len(),
        "revision": rev,
    }))
}

/// Writes the training set. The manifest is only read.
pub fn export(store: &ProjectStore, ratio: Option<MixRatio>, out: &Path, target: Option<usize>) -> CliResult<Value> {
    let snap = store.load()?;
    let mut opts = ExportOptions::from_manifest(&snap.manifest);
    if let Some(r) = ratio {
        opts.ratio = r;
    }
    opts.target = target;
    let index = export_dataset(&snap.manifest, store.root(), out, &opts)?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "out": out,
        "ratio": index.ratio,
        "counts": index.counts,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Pnp,
    Procrustes,
}

pub struct EstimateArgs<'a> {
    pub keypoints: &'a [AnnotatedKeypoint],
    pub model: &'a ObjectModel,
    pub intrinsics: &'a CameraIntrinsics,
    pub cloud: Option<&'a Path>,
    pub branch: Branch,
    pub icp: bool,
    pub seed: u64,
}

/// `camera_from_object` from detected keypoints.
pub fn estimate(args: &EstimateArgs) -> CliResult<PoseEstimate> {
    let cloud = args.cloud.map(load_cloud).transpose()?;
    let est = match args.branch {
        Branch::Pnp => pnp_ransac(
            args.keypoints,
            args.model,
            args.intrinsics,
            &RansacConfig { seed: args.seed, ..RansacConfig::default() },
        )?,
        Branch::Procrustes => {
            let cloud = cloud
                .as_ref()
                .ok_or_else(|| CliError::invalid("cloud", "the procrustes branch needs a point cloud"))?;
            estimate_from_cloud(args.keypoints, args.model, args.intrinsics, cloud, &Branch3dConfig::default())?
        }
    };
    if !args.icp {
        return Ok(est);
    }
    let cloud = cloud.as_ref().ok_or_else(|| CliError::invalid("cloud", "ICP refinement needs a point cloud"))?;
    Ok(icp_refine(&est, args.model, cloud, &IcpConfig::default())?)
}

/// Writes a synthetic evaluation scene to `out`.
pub fn synth_scene(cfg: &SynthConfig, out: &Path) -> CliResult<Value> {
    let scene = generate_scene(cfg)?;
    scene.save(out)?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "out": out,
        "frames": scene.frames.len(),
        "keypoints": scene.model.keypoints.len(),
    }))
}

/// Writes a synthetic label-generation session (images, corners,
/// annotations, model, truth) to `out`.
pub fn synth_session(cfg: &FixtureConfig, out: &Path) -> CliResult<Value> {
    let layout = write_session_fixture(out, cfg)?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "out": out,
        "frames": cfg.session.n_frames,
        "layout": layout,
    }))
}

/// A bare transform or anything with a `pose` field, such as an estimate.
fn read_pose(path: &Path) -> CliResult<RigidTransform> {
    let v: Value = load_json(path)?;
    let inner = v.get("pose").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| poselab_core::Error::parse(path, format!("not a pose: {e}")).into())
}

pub fn eval_pose(estimate: &Path, truth: &Path) -> CliResult<Value> {
    let e = evaluate(&read_pose(estimate)?, &read_pose(truth)?);
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "position_error": e.position_error,
        "rpy_error": e.rpy_error,
        "geodesic_angle": e.geodesic_angle,
    }))
}

/// `estimates` maps frame ids to poses or estimates.
pub fn eval_scene(scene_dir: &Path, estimates: &Path) -> CliResult<Value> {
    let scene = SynthScene::load(scene_dir)?;
    let raw: HashMap<String, Value> = load_json(estimates)?;
    let mut poses = HashMap::with_capacity(raw.len());
    for (id, v) in raw {
        let inner = v.get("pose").cloned().unwrap_or(v);
        let pose: RigidTransform = serde_json::from_value(inner)
            .map_err(|e| CliError::invalid(format!("estimates.{id}"), format!("not a pose: {e}")))?;
        poses.insert(id, pose);
    }
    let report = evaluate_scene(&scene, &poses);
    let mut v = serde_json::to_value(&report).expect("plain struct");
    v["schema_version"] = json!(SCHEMA_VERSION);
    Ok(v)
}
