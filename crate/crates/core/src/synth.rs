//! Deterministic synthetic scenes with known ground truth.
//!
//! The reference object is a 0.30 × 0.12 × 0.08 m box centred at the origin
//! with 20 keypoints on its faces. "Up" is `−z`, matching a marker frame whose
//! `z` axis points into the table.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{geodesic_angle, project, rpy_from_quat, CameraIntrinsics, Pixel, RigidTransform, UnitQuat, Vec3};
use crate::io::{load_json, save_cloud, save_json, save_keypoints, save_mesh_ply};
use crate::labelgen::{label_frame, BoardSpec, LabeledKeypoint};
use crate::model::{ModelKeypoint, ObjectModel, PointCloud};
use crate::triangulation::AnnotatedKeypoint;
use crate::SCHEMA_VERSION;

pub const BOX_SIZE: [f64; 3] = [0.30, 0.12, 0.08];

/// Approximate mesh cell edge, meters.
const MESH_CELL: f64 = 0.01;

/// Default cloud density, points per square meter.
pub const CLOUD_DENSITY: f64 = 250_000.0;

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).expect("valid constants")
}

/// Axis-aligned box mesh, each face a grid of roughly `cell`-sized quads with
/// outward-facing triangles.
pub fn box_mesh(size: [f64; 3], cell: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    // (normal axis, sign); u and v axes are chosen so u × v points outward.
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (mut ua, mut va) = ((axis + 1) % 3, (axis + 2) % 3);
            if sign < 0.0 {
                std::mem::swap(&mut ua, &mut va);
            }
            let nu = (size[ua] / cell).round().max(1.0) as usize;
            let nv = (size[va] / cell).round().max(1.0) as usize;
            let base = verts.len();
            for j in 0..=nv {
                for i in 0..=nu {
                    let mut p = Vec3::zeros();
                    p[axis] = sign * h[axis];
                    p[ua] = -h[ua] + size[ua] * i as f64 / nu as f64;
                    p[va] = -h[va] + size[va] * j as f64 / nv as f64;
                    verts.push(p);
                }
            }
            let at = |i: usize, j: usize| base + j * (nu + 1) + i;
            for j in 0..nv {
                for i in 0..nu {
                    faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                    faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
                }
            }
        }
    }
    (verts, faces)
}

/// Keypoints at least 2 cm from every edge: six on top, four on each long
/// side, two on each end and two underneath.
pub fn box_keypoints() -> Vec<ModelKeypoint> {
    let [hx, hy, hz] = [BOX_SIZE[0] / 2.0, BOX_SIZE[1] / 2.0, BOX_SIZE[2] / 2.0];
    let mut p = Vec::new();
    for x in [-0.10, 0.0, 0.10] {
        for y in [-0.03, 0.03] {
            p.push(Vec3::new(x, y, -hz));
        }
    }
    for y in [-hy, hy] {
        for x in [-0.10, 0.10] {
            for z in [-0.015, 0.015] {
                p.push(Vec3::new(x, y, z));
            }
        }
    }
    for x in [-hx, hx] {
        for z in [-0.015, 0.015] {
            p.push(Vec3::new(x, 0.0, z));
        }
    }
    for x in [-0.05, 0.05] {
        p.push(Vec3::new(x, 0.0, hz));
    }
    p.into_iter().enumerate().map(|(i, position)| ModelKeypoint { id: format!("kp{i:02}"), position }).collect()
}

pub fn box_tool_model() -> ObjectModel {
    let (v, f) = box_mesh(BOX_SIZE, MESH_CELL);
    ObjectModel::new(box_keypoints(), v, f).expect("generated model is valid")
}

/// Uniform area-weighted surface samples.
pub fn sample_surface(model: &ObjectModel, density: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    let tris: Vec<[Vec3; 3]> = model.triangles().collect();
    let mut cum = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for [a, b, c] in &tris {
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cum.push(total);
    }
    if tris.is_empty() || !(total > 0.0) {
        return Vec::new();
    }
    let n = (total * density).round() as usize;
    (0..n)
        .map(|_| {
            let r = rng.random_range(0.0..total);
            let i = cum.partition_point(|&c| c <= r).min(tris.len() - 1);
            let [a, b, c] = tris[i];
            let s = rng.random::<f64>().sqrt();
            let t = rng.random::<f64>();
            a * (1.0 - s) + b * (s * (1.0 - t)) + c * (s * t)
        })
        .collect()
}

/// Camera at `eye` looking at `target`, image `y` aligned with world `down`.
/// Returns `camera_from_world`.
pub fn look_at(eye: &Vec3, target: &Vec3, down: &Vec3, roll_deg: f64) -> Result<RigidTransform> {
    let z = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::invalid("eye", "coincides with target"))?;
    let x = down
        .cross(&z)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("eye", "viewing direction is parallel to `down`"))?;
    let y = z.cross(&x);
    let r = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let world_from_camera = RigidTransform::from_matrix(&r, *eye);
    let roll = RigidTransform::from_rotation(UnitQuat::from_scaled_axis(Vec3::z() * roll_deg.to_radians()));
    Ok(roll.compose(&world_from_camera.invert()))
}

fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_frames: usize,
    /// Gaussian pixel noise, per coordinate.
    pub noise_px: f64,
    /// Fraction of keypoints per frame displaced by 50-150 px.
    pub outlier_rate: f64,
    /// Gaussian noise on every cloud point, per axis, meters.
    pub cloud_noise: f64,
    pub distance: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub roll_deg: f64,
    pub cloud_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 100,
            noise_px: 0.0,
            outlier_rate: 0.0,
            cloud_noise: 0.0,
            distance: [0.8, 1.2],
            elevation_deg: [25.0, 65.0],
            roll_deg: 10.0,
            cloud_density: CLOUD_DENSITY,
            seed: 0,
        }
    }
}

fn non_negative(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::invalid("n_frames", "need at least 2 views"));
        }
        self.validate_views()
    }

    fn validate_views(&self) -> Result<()> {
        if !non_negative(self.noise_px) {
            return Err(Error::invalid("noise_px", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::invalid("outlier_rate", "must lie in [0, 1]"));
        }
        if !non_negative(self.cloud_noise) {
            return Err(Error::invalid("cloud_noise", "must be non-negative"));
        }
        if !(self.distance[0] > 0.0 && self.distance[0] <= self.distance[1]) {
            return Err(Error::invalid("distance", "must be a positive ordered range"));
        }
        if !(self.elevation_deg[0] <= self.elevation_deg[1]
            && self.elevation_deg[0] > -90.0
            && self.elevation_deg[1] < 90.0)
        {
            return Err(Error::invalid("elevation_deg", "must be an ordered range inside (-90, 90)"));
        }
        if !non_negative(self.cloud_density) {
            return Err(Error::invalid("cloud_density", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFrame {
    pub frame_id: String,
    /// `marker_from_camera`.
    pub camera_pose_in_marker: RigidTransform,
    pub camera_from_object: RigidTransform,
    /// Observed keypoints: noisy, with outliers.
    pub keypoints: Vec<AnnotatedKeypoint>,
    /// Noise-free projections of every keypoint with self-occlusion flags.
    pub truth: Vec<LabeledKeypoint>,
    pub outlier_ids: Vec<String>,
}

impl SynthFrame {
    /// Observed keypoints whose model point is not self-occluded.
    pub fn visible_keypoints(&self) -> Vec<AnnotatedKeypoint> {
        self.keypoints.iter().zip(&self.truth).filter(|(_, t)| t.visible).map(|(k, _)| k.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub schema_version: u32,
    pub config: SynthConfig,
    pub intrinsics: CameraIntrinsics,
    pub model: ObjectModel,
    pub object_pose_in_marker: RigidTransform,
    pub frames: Vec<SynthFrame>,
}

/// Where the box sits in generated scenes: resting on the marker plane,
/// yawed by 20°.
pub fn default_object_pose() -> RigidTransform {
    RigidTransform::new(
        UnitQuat::from_scaled_axis(Vec3::z() * 20f64.to_radians()),
        Vec3::new(0.09, 0.26, -BOX_SIZE[2] / 2.0),
    )
}

fn observe(
    model: &ObjectModel,
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
    noise_px: f64,
    outlier_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<AnnotatedKeypoint>, Vec<LabeledKeypoint>, Vec<String>)> {
    let labels = label_frame(pose, model, intr);
    if !labels.valid {
        return Err(Error::invalid("distance", labels.invalid_reason.unwrap_or_default()));
    }
    let truth = labels.keypoints;
    let normal = Normal::new(0.0, noise_px.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut observed: Vec<AnnotatedKeypoint> = truth
        .iter()
        .map(|t| {
            let (du, dv) = if noise_px > 0.0 { (normal.sample(rng), normal.sample(rng)) } else { (0.0, 0.0) };
            AnnotatedKeypoint { keypoint_id: t.keypoint_id.clone(), pixel: Pixel::new(t.pixel.u + du, t.pixel.v + dv) }
        })
        .collect();
    let n_out = (outlier_rate * observed.len() as f64).floor() as usize;
    let picked = rand::seq::index::sample(rng, observed.len(), n_out).into_vec();
    let mut outlier_ids = Vec::with_capacity(n_out);
    for i in picked {
        let r = rng.random_range(50.0..150.0);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        observed[i].pixel.u += r * a.cos();
        observed[i].pixel.v += r * a.sin();
        outlier_ids.push(observed[i].keypoint_id.clone());
    }
    outlier_ids.sort();
    Ok((observed, truth, outlier_ids))
}

/// `camera_from_world` for a camera on a sphere around `target`, above the
/// `z = 0` plane (world `−z` is up).
fn random_view(cfg: &SynthConfig, target: &Vec3, rng: &mut ChaCha8Rng) -> Result<RigidTransform> {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(cfg.elevation_deg[0]..=cfg.elevation_deg[1]).to_radians();
    let d = rng.random_range(cfg.distance[0]..=cfg.distance[1]);
    let roll = if cfg.roll_deg > 0.0 { rng.random_range(-cfg.roll_deg..cfg.roll_deg) } else { 0.0 };
    let jitter = Vec3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0);
    let eye = target + Vec3::new(d * el.cos() * az.cos(), d * el.cos() * az.sin(), -d * el.sin());
    look_at(&eye, &(target + jitter), &Vec3::z(), roll)
}

/// Views of the box model from elevated cameras. Frame `i` depends only on
/// `(cfg.seed, i)`.
pub fn generate_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let model = box_tool_model();
    let intr = default_intrinsics();
    let marker_from_object = default_object_pose();
    let target = marker_from_object.translation;
    let frames = (0..cfg.n_frames)
        .into_par_iter()
        .map(|i| {
            let mut rng = frame_rng(cfg.seed, i);
            let camera_from_marker = random_view(cfg, &target, &mut rng)?;
            let camera_from_object = camera_from_marker.compose(&marker_from_object);
            let (keypoints, truth, outlier_ids) =
                observe(&model, &intr, &camera_from_object, cfg.noise_px, cfg.outlier_rate, &mut rng)?;
            Ok(SynthFrame {
                frame_id: format!("frame_{i:05}"),
                camera_pose_in_marker: camera_from_marker.invert(),
                camera_from_object,
                keypoints,
                truth,
                outlier_ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthScene {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        intrinsics: intr,
        model,
        object_pose_in_marker: marker_from_object,
        frames,
    })
}

impl SynthScene {
    /// Surface samples in the object frame, without noise.
    pub fn object_cloud(&self) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_c10d);
        PointCloud::new(sample_surface(&self.model, self.config.cloud_density, &mut rng)).expect("finite samples")
    }

    /// Camera-frame cloud for frame `index` with `cloud_noise` applied.
    pub fn frame_cloud(&self, index: usize) -> Result<PointCloud> {
        let f = self.frames.get(index).ok_or_else(|| Error::invalid("frame", format!("no frame {index}")))?;
        let cloud = self.object_cloud().transformed(&f.camera_from_object);
        if self.config.cloud_noise == 0.0 {
            return Ok(cloud);
        }
        let mut rng = frame_rng(self.config.seed ^ 0x5eed_c10d, index);
        let normal = Normal::new(0.0, self.config.cloud_noise).expect("finite sigma");
        let pts = cloud
            .points()
            .iter()
            .map(|p| p + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        PointCloud::new(pts)
    }

    /// Writes `scene.json`, `intrinsics.json`, `mesh.ply`, `keypoints.txt`
    /// and `cloud.ply`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_json(&dir.join("scene.json"), self)?;
        save_json(&dir.join("intrinsics.json"), &self.intrinsics)?;
        save_mesh_ply(&dir.join("mesh.ply"), &self.model.mesh_vertices, &self.model.mesh_faces)?;
        save_keypoints(&dir.join("keypoints.txt"), &self.model.keypoints)?;
        save_cloud(&dir.join("cloud.ply"), &self.object_cloud())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let s: SynthScene = load_json(&dir.join("scene.json"))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid("schema_version", format!("unsupported version {}", s.schema_version)));
        }
        s.model.validate()?;
        Ok(s)
    }
}

/// Error of an estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Meters.
    pub position_error: f64,
    /// Signed `(Δroll, Δpitch, Δyaw)` of the Z-Y-X decompositions, degrees,
    /// wrapped to (−180, 180].
    pub rpy_error: [f64; 3],
    /// Degrees.
    pub geodesic_angle: f64,
}

fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

pub fn evaluate(estimate: &RigidTransform, truth: &RigidTransform) -> PoseError {
    let e = rpy_from_quat(estimate.rotation()).as_array();
    let t = rpy_from_quat(truth.rotation()).as_array();
    PoseError {
        position_error: (estimate.translation - truth.translation).norm(),
        rpy_error: [wrap_deg(e[0] - t[0]), wrap_deg(e[1] - t[1]), wrap_deg(e[2] - t[2])],
        geodesic_angle: geodesic_angle(estimate.rotation(), truth.rotation()).to_degrees(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame_id: String,
    /// `None` when no estimate was produced.
    pub error: Option<PoseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub failures: usize,
    pub median_position_error: Option<f64>,
    pub median_geodesic_angle: Option<f64>,
    /// Per-axis median of `|rpy_error|`.
    pub median_abs_rpy_error: Option<[f64; 3]>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Compares `camera_from_object` estimates, keyed by frame id, with the scene.
pub fn evaluate_scene(scene: &SynthScene, estimates: &HashMap<String, RigidTransform>) -> EvalReport {
    let frames: Vec<FrameEval> = scene
        .frames
        .iter()
        .map(|f| FrameEval {
            frame_id: f.frame_id.clone(),
            error: estimates.get(&f.frame_id).map(|e| evaluate(e, &f.camera_from_object)),
        })
        .collect();
    let errs: Vec<PoseError> = frames.iter().filter_map(|f| f.error).collect();
    let med = |g: &dyn Fn(&PoseError) -> f64| median(&mut errs.iter().map(g).collect::<Vec<_>>());
    let rpy = match (med(&|e| e.rpy_error[0].abs()), med(&|e| e.rpy_error[1].abs()), med(&|e| e.rpy_error[2].abs())) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    EvalReport {
        failures: frames.len() - errs.len(),
        median_position_error: med(&|e| e.position_error),
        median_geodesic_angle: med(&|e| e.geodesic_angle),
        median_abs_rpy_error: rpy,
        frames,
    }
}

/// Label-generation session: a board at the marker origin and the box
/// resting on the board plane next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub n_frames: usize,
    pub corner_noise_px: f64,
    pub distance: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { n_frames: 300, corner_noise_px: 0.5, distance: [0.8, 1.2], elevation_deg: [35.0, 70.0], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFrame {
    pub frame_id: String,
    /// `marker_from_camera`.
    pub camera_pose_in_marker: RigidTransform,
    pub corners: Vec<Pixel>,
    /// Noise-free keypoint projections.
    pub keypoints: Vec<AnnotatedKeypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSession {
    pub intrinsics: CameraIntrinsics,
    pub board: BoardSpec,
    pub model: ObjectModel,
    pub marker_from_object: RigidTransform,
    pub frames: Vec<SessionFrame>,
}

pub fn default_board() -> BoardSpec {
    BoardSpec { rows: 5, cols: 7, square_size: 0.03 }
}

/// Views in which every board corner and keypoint projects inside the image.
pub fn generate_session(cfg: &SessionConfig) -> Result<SyntheticSession> {
    let model = box_tool_model();
    let intr = default_intrinsics();
    let board = default_board();
    let corners3 = board.corner_points();
    let marker_from_object = default_object_pose();
    let target = Vec3::new(0.09, 0.15, 0.0);
    let view = SynthConfig { distance: cfg.distance, elevation_deg: cfg.elevation_deg, ..SynthConfig::default() };
    view.validate_views()?;
    let normal = Normal::new(0.0, cfg.corner_noise_px.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let frames = (0..cfg.n_frames)
        .into_par_iter()
        .map(|i| {
            let mut rng = frame_rng(cfg.seed, i);
            for _ in 0..1000 {
                let camera_from_marker = random_view(&view, &target, &mut rng)?;
                let inside = |p: &Vec3| {
                    project(&intr, &camera_from_marker.transform_point(p))
                        .map(|px| px.u > 5.0 && px.v > 5.0 && px.u < 634.0 && px.v < 474.0)
                        .unwrap_or(false)
                };
                let camera_from_object = camera_from_marker.compose(&marker_from_object);
                let kps_in = model.outline_points().iter().all(|p| inside(&marker_from_object.transform_point(p)));
                if !(corners3.iter().all(inside) && kps_in) {
                    continue;
                }
                let corners = corners3
                    .iter()
                    .map(|p| {
                        let px = project(&intr, &camera_from_marker.transform_point(p)).expect("checked");
                        if cfg.corner_noise_px > 0.0 {
                            Pixel::new(px.u + normal.sample(&mut rng), px.v + normal.sample(&mut rng))
                        } else {
                            px
                        }
                    })
                    .collect();
                let keypoints = model
                    .keypoints
                    .iter()
                    .map(|k| AnnotatedKeypoint {
                        keypoint_id: k.id.clone(),
                        pixel: project(&intr, &camera_from_object.transform_point(&k.position)).expect("checked"),
                    })
                    .collect();
                return Ok(SessionFrame {
                    frame_id: format!("frame_{i:05}"),
                    camera_pose_in_marker: camera_from_marker.invert(),
                    corners,
                    keypoints,
                });
            }
            Err(Error::invalid("distance", "no view keeps the board and object in frame"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSession { intrinsics: intr, board, model, marker_from_object, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_model_shape() {
        let m = box_tool_model();
        assert_eq!(m.keypoints.len(), 20);
        let area = 2.0 * (0.30 * 0.12 + 0.30 * 0.08 + 0.12 * 0.08);
        assert!((m.surface_area() - area).abs() < 1e-12);
        for k in &m.keypoints {
            let p = k.position;
            let on_faces = (0..3).filter(|&a| (p[a].abs() - BOX_SIZE[a] / 2.0).abs() < 1e-12).count();
            assert_eq!(on_faces, 1, "{}", k.id);
            for a in 0..3 {
                if (p[a].abs() - BOX_SIZE[a] / 2.0).abs() > 1e-12 {
                    assert!(BOX_SIZE[a] / 2.0 - p[a].abs() >= 0.02 - 1e-12, "{} too close to an edge", k.id);
                }
            }
        }
    }

    #[test]
    fn mesh_faces_point_outward() {
        let m = box_tool_model();
        for [a, b, c] in m.triangles() {
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            assert!(n.dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn surface_density() {
        let m = box_tool_model();
        let pts = sample_surface(&m, CLOUD_DENSITY, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pts.len(), (m.surface_area() * CLOUD_DENSITY).round() as usize);
        assert!(pts.iter().all(|p| (0..3).any(|a| (p[a].abs() - BOX_SIZE[a] / 2.0).abs() < 1e-12)));
    }

    #[test]
    fn look_at_centres_target() {
        let intr = default_intrinsics();
        let t = look_at(&Vec3::new(1.0, 0.5, -0.7), &Vec3::new(0.1, 0.0, 0.0), &Vec3::z(), 0.0).unwrap();
        let p = project(&intr, &t.transform_point(&Vec3::new(0.1, 0.0, 0.0))).unwrap();
        assert!(p.distance(&intr.principal_point()) < 1e-9);
        // Down in the world is down in the image.
        let below = project(&intr, &t.transform_point(&Vec3::new(0.1, 0.0, 0.1))).unwrap();
        assert!(below.v > p.v);
    }

    #[test]
    fn scenes_are_reproducible_and_independent_per_frame() {
        let cfg = SynthConfig { n_frames: 6, noise_px: 1.0, outlier_rate: 0.2, seed: 3, ..SynthConfig::default() };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&SynthConfig { n_frames: 3, ..cfg.clone() }).unwrap();
        assert_eq!(a.frames[..3], b.frames[..]);
        assert!(a.frames.iter().all(|f| f.outlier_ids.len() == 4));
        for f in &a.frames {
            for (o, t) in f.keypoints.iter().zip(&f.truth) {
                let d = o.pixel.distance(&t.pixel);
                if f.outlier_ids.contains(&o.keypoint_id) {
                    assert!(d > 40.0);
                }
            }
        }
    }

    #[test]
    fn pose_error_examples() {
        let t = RigidTransform::new(UnitQuat::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(0.0, 0.1, 1.0));
        let e = evaluate(&t, &t);
        assert_eq!(e.position_error, 0.0);
        assert_eq!(e.rpy_error, [0.0, 0.0, 0.0]);
        assert!(e.geodesic_angle < 1e-6);

        let id = RigidTransform::identity();
        let moved = RigidTransform::from_translation(Vec3::new(0.03, 0.0, 0.0));
        assert!((evaluate(&moved, &id).position_error - 0.03).abs() < 1e-15);

        let yawed = RigidTransform::from_rotation(UnitQuat::from_scaled_axis(Vec3::z() * 10f64.to_radians()));
        let e = evaluate(&yawed, &id);
        assert!(e.rpy_error[0].abs() < 1e-9 && e.rpy_error[1].abs() < 1e-9);
        assert!((e.rpy_error[2] - 10.0).abs() < 1e-9);
        assert!((e.geodesic_angle - 10.0).abs() < 1e-9);
        let back = evaluate(&id, &yawed);
        assert!((back.rpy_error[2] + 10.0).abs() < 1e-9);
        assert_eq!(median(&mut [3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }

    #[test]
    fn rpy_difference_wraps() {
        let a = RigidTransform::from_rotation(UnitQuat::from_scaled_axis(Vec3::z() * 179f64.to_radians()));
        let b = RigidTransform::from_rotation(UnitQuat::from_scaled_axis(Vec3::z() * (-179f64).to_radians()));
        let e = evaluate(&a, &b);
        assert!((e.rpy_error[2] + 2.0).abs() < 1e-9);
        assert!((e.geodesic_angle - 2.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_views_is_rejected() {
        let cfg = SynthConfig { n_frames: 1, ..SynthConfig::default() };
        assert!(generate_scene(&cfg).is_err());
    }

    #[test]
    fn planted_outlier_count() {
        let s = generate_scene(&SynthConfig {
            n_frames: 4,
            outlier_rate: 0.3,
            cloud_density: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(s.frames.iter().all(|f| f.outlier_ids.len() == 6));
    }

    #[test]
    fn noiseless_views_close_the_triangulation_loop() {
        use crate::labelgen::object_pose_in_marker;
        use crate::triangulation::{triangulate_keypoints, AnnotationSet};

        let s = generate_scene(&SynthConfig { n_frames: 5, cloud_density: 0.0, ..SynthConfig::default() }).unwrap();
        let poses: HashMap<String, RigidTransform> =
            s.frames.iter().map(|f| (f.frame_id.clone(), f.camera_pose_in_marker)).collect();
        let sets: Vec<AnnotationSet> = s
            .frames
            .iter()
            .map(|f| {
                let mut set = AnnotationSet::new(f.frame_id.clone());
                for k in &f.keypoints {
                    set.set(k.keypoint_id.clone(), k.pixel);
                }
                set
            })
            .collect();
        let report = triangulate_keypoints(&sets, &poses, &s.intrinsics).unwrap();
        let fit = object_pose_in_marker(&report.keypoints, &s.model).unwrap();
        let e = evaluate(&fit.transform, &s.object_pose_in_marker);
        assert!(e.position_error < 1e-9, "{e:?}");
        assert!(e.geodesic_angle < 1e-7, "{e:?}");
    }

    #[test]
    fn frame_cloud_noise_is_seeded() {
        let s = generate_scene(&SynthConfig {
            n_frames: 2,
            cloud_noise: 0.001,
            cloud_density: 2000.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let a = s.frame_cloud(1).unwrap();
        assert_eq!(a.points(), s.frame_cloud(1).unwrap().points());
        let clean = s.object_cloud().transformed(&s.frames[1].camera_from_object);
        assert_ne!(a.points(), clean.points());
        assert!(s.frame_cloud(2).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&SynthConfig { n_frames: 2, cloud_density: 2000.0, ..SynthConfig::default() }).unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(SynthScene::load(dir.path()).unwrap(), s);
        assert!(dir.path().join("cloud.ply").exists());
    }

    #[test]
    fn session_views_keep_everything_in_frame() {
        let s = generate_session(&SessionConfig { n_frames: 10, ..SessionConfig::default() }).unwrap();
        assert_eq!(s.frames.len(), 10);
        assert!(s.frames.iter().all(|f| f.corners.len() == 35));
    }
}
