//! Synthetic label-generation session written out as ordinary input files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use poselab_core::io::{save_corners, save_json, save_keypoints, save_mesh_ply, save_pixel_keypoints};
use poselab_core::labelgen::BoardSpec;
use poselab_core::raster::render_depth;
use poselab_core::synth::{generate_session, SessionConfig, SyntheticSession};
use poselab_core::{AnnotatedKeypoint, ObjectModel, Pixel, RigidTransform, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Keypoints clicked in the annotated frames: the six on the top face.
pub const ANNOTATED_KEYPOINTS: [&str; 6] = ["kp00", "kp01", "kp02", "kp03", "kp04", "kp05"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub session: SessionConfig,
    /// Number of evenly spaced frames with annotation files.
    pub annotated_frames: usize,
    pub annotation_noise_px: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { session: SessionConfig::default(), annotated_frames: 5, annotation_noise_px: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub frame_id: String,
    pub camera_pose_in_marker: RigidTransform,
    pub keypoints: Vec<AnnotatedKeypoint>,
}

/// Ground truth written next to the fixture as `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub schema_version: u32,
    pub board: BoardSpec,
    pub object_pose_in_marker: RigidTransform,
    pub annotated: Vec<String>,
    pub frames: Vec<TruthFrame>,
}

/// Paths of the generated inputs, relative to the fixture directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLayout {
    pub intrinsics: PathBuf,
    pub mesh: PathBuf,
    pub keypoints: PathBuf,
    pub frames: PathBuf,
    pub corners: PathBuf,
    pub annotations: PathBuf,
    pub truth: PathBuf,
    pub board: String,
}

fn face_colors(model: &ObjectModel) -> Vec<Rgba<u8>> {
    model
        .triangles()
        .map(|[a, b, c]| {
            let n = (b - a).cross(&(c - a));
            let axis = (0..3).max_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs())).unwrap_or(0);
            let shade = if n[axis] > 0.0 { 60 } else { 0 };
            match axis {
                0 => Rgba([200 - shade, 60, 40, 255]),
                1 => Rgba([50, 180 - shade, 60, 255]),
                _ => Rgba([40, 70, 200 - shade, 255]),
            }
        })
        .collect()
}

/// Board squares, the box shaded by face orientation and a grey table.
fn render_frame(s: &SyntheticSession, marker_from_camera: &RigidTransform, colors: &[Rgba<u8>]) -> RgbaImage {
    let k = s.intrinsics;
    let camera_from_object = marker_from_camera.invert().compose(&s.marker_from_object);
    let depth = render_depth(&camera_from_object, &s.model, &k);
    let sq = s.board.square_size;
    let (cols, rows) = (s.board.cols as f64, s.board.rows as f64);
    RgbaImage::from_fn(k.width(), k.height(), |x, y| {
        if let Some(f) = depth.face_at(x, y) {
            return colors[f];
        }
        let dir = marker_from_camera.transform_vector(&k.bearing(Pixel::new(x as f64, y as f64)));
        let o: Vec3 = marker_from_camera.translation;
        if dir.z.abs() > 1e-12 {
            let t = -o.z / dir.z;
            if t > 0.0 {
                let p = o + dir * t;
                let (i, j) = ((p.x / sq).floor(), (p.y / sq).floor());
                if i >= -1.0 && i < cols && j >= -1.0 && j < rows {
                    let v = if (i + j) as i64 % 2 == 0 { 20 } else { 235 };
                    return Rgba([v, v, v, 255]);
                }
            }
        }
        Rgba([128, 128, 128, 255])
    })
}

fn io_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| poselab_core::Error::io(p, e).into())
}

/// Writes intrinsics, model, rendered frames, corner files, annotation files
/// and ground truth under `dir`.
pub fn write_session_fixture(dir: &Path, cfg: &FixtureConfig) -> CliResult<FixtureLayout> {
    if cfg.annotated_frames == 0 || cfg.annotated_frames > cfg.session.n_frames {
        return Err(CliError::invalid("annotated_frames", "must lie in [1, n_frames]"));
    }
    let s = generate_session(&cfg.session)?;
    let layout = FixtureLayout {
        intrinsics: "intrinsics.json".into(),
        mesh: "model/mesh.ply".into(),
        keypoints: "model/keypoints.txt".into(),
        frames: "frames".into(),
        corners: "corners".into(),
        annotations: "annotations".into(),
        truth: "truth.json".into(),
        board: format!("{}x{}:{}", s.board.rows, s.board.cols, s.board.square_size),
    };
    for d in ["model", "frames", "corners", "annotations"] {
        io_dir(&dir.join(d))?;
    }
    save_json(&dir.join(&layout.intrinsics), &s.intrinsics)?;
    save_mesh_ply(&dir.join(&layout.mesh), &s.model.mesh_vertices, &s.model.mesh_faces)?;
    save_keypoints(&dir.join(&layout.keypoints), &s.model.keypoints)?;

    let colors = face_colors(&s.model);
    let stride = s.frames.len() / cfg.annotated_frames;
    let annotated: Vec<usize> = (0..cfg.annotated_frames).map(|c| c * stride).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.session.seed ^ 0xa11_07a7e);
    let noise = Normal::new(0.0, cfg.annotation_noise_px.max(f64::MIN_POSITIVE))
        .map_err(|_| CliError::invalid("annotation_noise_px", "must be finite"))?;
    for (i, f) in s.frames.iter().enumerate() {
        let png = dir.join(&layout.frames).join(format!("{}.png", f.frame_id));
        render_frame(&s, &f.camera_pose_in_marker, &colors)
            .save(&png)
            .map_err(|e| poselab_core::Error::Image { path: png, source: e })?;
        save_corners(&dir.join(&layout.corners).join(format!("{}.txt", f.frame_id)), &f.corners)?;
        if annotated.contains(&i) {
            let clicks: Vec<AnnotatedKeypoint> = f
                .keypoints
                .iter()
                .filter(|k| ANNOTATED_KEYPOINTS.contains(&k.keypoint_id.as_str()))
                .map(|k| {
                    let mut p = k.pixel;
                    if cfg.annotation_noise_px > 0.0 {
                        p.u += noise.sample(&mut rng);
                        p.v += noise.sample(&mut rng);
                    }
                    AnnotatedKeypoint { keypoint_id: k.keypoint_id.clone(), pixel: p }
                })
                .collect();
            save_pixel_keypoints(&dir.join(&layout.annotations).join(format!("{}.txt", f.frame_id)), &clicks)?;
        }
    }
    let truth = FixtureTruth {
        schema_version: poselab_core::SCHEMA_VERSION,
        board: s.board,
        object_pose_in_marker: s.marker_from_object,
        annotated: annotated.iter().map(|&i| s.frames[i].frame_id.clone()).collect(),
        frames: s
            .frames
            .iter()
            .map(|f| TruthFrame {
                frame_id: f.frame_id.clone(),
                camera_pose_in_marker: f.camera_pose_in_marker,
                keypoints: f.keypoints.clone(),
            })
            .collect(),
    };
    save_json(&dir.join(&layout.truth), &truth)?;
    Ok(layout)
}
