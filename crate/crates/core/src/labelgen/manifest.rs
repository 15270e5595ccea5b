//! Persistent project document.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, RigidTransform};
use crate::model::ObjectModel;
use crate::triangulation::{AnnotationSet, Keypoint3D};
use crate::SCHEMA_VERSION;

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Smallest box containing every pixel; `None` for an empty slice.
    pub fn enclosing(points: &[Pixel]) -> Option<BBox> {
        let first = points.first()?;
        let mut b = BBox { x_min: first.u, y_min: first.v, x_max: first.u, y_max: first.v };
        for p in &points[1..] {
            b.x_min = b.x_min.min(p.u);
            b.y_min = b.y_min.min(p.v);
            b.x_max = b.x_max.max(p.u);
            b.y_max = b.y_max.max(p.v);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: &Pixel) -> bool {
        p.u >= self.x_min && p.u <= self.x_max && p.v >= self.y_min && p.v <= self.y_max
    }

    /// Clamps to `[0, width] × [0, height]`; the flag is set when anything moved.
    pub fn clamped(&self, width: u32, height: u32) -> (BBox, bool) {
        let (w, h) = (width as f64, height as f64);
        let c = BBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        };
        (c, c != *self)
    }

    /// `(cx, cy, w, h)` normalized by the image size.
    pub fn normalized(&self, width: u32, height: u32) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            (self.x_min + self.x_max) / (2.0 * w),
            (self.y_min + self.y_max) / (2.0 * h),
            self.width() / w,
            self.height() / h,
        ]
    }
}

/// Checkerboard inner-corner grid. Corner `(r, c)` sits at
/// `(c·square_size, r·square_size, 0)` in the marker frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub rows: u32,
    pub cols: u32,
    /// Meters.
    pub square_size: f64,
}

impl BoardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::invalid("board", "at least 2×2 inner corners required"));
        }
        if !(self.square_size > 0.0 && self.square_size.is_finite()) {
            return Err(Error::invalid("board.square_size", "must be positive"));
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    /// Marker-frame corner positions in row-major order.
    pub fn corner_points(&self) -> Vec<crate::geom::Vec3> {
        let mut pts = Vec::with_capacity(self.corner_count());
        for r in 0..self.rows {
            for c in 0..self.cols {
                pts.push(crate::geom::Vec3::new(c as f64 * self.square_size, r as f64 * self.square_size, 0.0));
            }
        }
        pts
    }
}

impl FromStr for BoardSpec {
    type Err = Error;

    /// `RxC:size`, e.g. `7x5:0.03`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("board", format!("`{s}` is not of the form RxC:size"));
        let (grid, size) = s.split_once(':').ok_or_else(bad)?;
        let (r, c) = grid.split_once(['x', 'X']).ok_or_else(bad)?;
        let spec = BoardSpec {
            rows: r.trim().parse().map_err(|_| bad())?,
            cols: c.trim().parse().map_err(|_| bad())?,
            square_size: size.trim().parse().map_err(|_| bad())?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Real-to-randomized mixing ratio, written `real:dr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixRatio {
    pub real: f64,
    pub dr: f64,
}

impl Default for MixRatio {
    fn default() -> Self {
        Self { real: 1.0, dr: 1.0 }
    }
}

impl MixRatio {
    pub fn real_fraction(&self) -> f64 {
        self.real / (self.real + self.dr)
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.real, self.dr)
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("ratio", format!("`{s}` is not of the form real:dr"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let r = MixRatio { real: a.trim().parse().map_err(|_| bad())?, dr: b.trim().parse().map_err(|_| bad())? };
        if !(r.real >= 0.0 && r.dr >= 0.0 && r.real + r.dr > 0.0) || !(r.real.is_finite() && r.dr.is_finite()) {
            return Err(bad());
        }
        Ok(r)
    }
}

impl Serialize for MixRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrConfig {
    pub n_samples: usize,
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub brightness: [f64; 2],
    pub saturation: [f64; 2],
    /// Directory of background images, relative to the project root unless absolute.
    pub background_dir: Option<PathBuf>,
    pub ratio: MixRatio,
    pub seed: u64,
}

impl Default for DrConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            rotation_deg: [-45.0, 45.0],
            scale: [0.7, 1.3],
            brightness: [0.6, 1.4],
            saturation: [0.6, 1.4],
            background_dir: None,
            ratio: MixRatio::default(),
            seed: 0,
        }
    }
}

impl DrConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("brightness", self.brightness),
            ("saturation", self.saturation),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::invalid(format!("dr.{name}"), "range must be finite and ordered"));
            }
        }
        if !(self.scale[0] > 0.0) {
            return Err(Error::invalid("dr.scale", "must be positive"));
        }
        if !(self.brightness[0] >= 0.0 && self.saturation[0] >= 0.0) {
            return Err(Error::invalid("dr.brightness", "multipliers must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of exported items assigned to the validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { val_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledKeypoint {
    pub keypoint_id: String,
    pub pixel: Pixel,
    pub visible: bool,
}

/// Labels derived for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    pub keypoints: Vec<LabeledKeypoint>,
    pub bbox: Option<BBox>,
    #[serde(default)]
    pub bbox_clamped: bool,
}

impl FrameLabels {
    pub fn invalid(reason: impl Into<String>) -> Self {
        Self {
            valid: false,
            invalid_reason: Some(reason.into()),
            keypoints: Vec::new(),
            bbox: None,
            bbox_clamped: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    /// Relative to the project root unless absolute.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_pose_in_marker: Option<RigidTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub board_residual_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnnotationSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<FrameLabels>,
}

impl FrameRecord {
    pub fn new(frame_id: impl Into<String>, image: impl Into<PathBuf>) -> Self {
        Self {
            frame_id: frame_id.into(),
            image: image.into(),
            camera_pose_in_marker: None,
            board_residual_px: None,
            annotations: None,
            labels: None,
        }
    }
}

/// One video: frames sharing a single object pose in the marker frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_pose_in_marker: Option<RigidTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_rmsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triangulated: Vec<Keypoint3D>,
    pub frames: Vec<FrameRecord>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            object_pose_in_marker: None,
            object_rmsd: None,
            triangulated: Vec::new(),
            frames: Vec::new(),
        }
    }

    pub fn frame(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn frame_mut(&mut self, frame_id: &str) -> Option<&mut FrameRecord> {
        self.frames.iter_mut().find(|f| f.frame_id == frame_id)
    }

    /// Annotations of every frame that has a camera pose.
    pub fn annotations(&self) -> Vec<AnnotationSet> {
        self.frames.iter().filter_map(|f| f.annotations.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub mesh: PathBuf,
    pub keypoints: PathBuf,
}

/// 2D similarity `p' = s·R(θ)·(p − center) + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2D {
    pub scale: f64,
    pub rotation_deg: f64,
    pub center: Pixel,
    pub translation: Pixel,
}

impl Similarity2D {
    pub fn apply(&self, p: &Pixel) -> Pixel {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let dx = p.u - self.center.u;
        let dy = p.v - self.center.v;
        Pixel::new(
            self.scale * (c * dx - s * dy) + self.translation.u,
            self.scale * (s * dx + c * dy) + self.translation.v,
        )
    }

    pub fn apply_inverse(&self, p: &Pixel) -> Pixel {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let dx = (p.u - self.translation.u) / self.scale;
        let dy = (p.v - self.translation.v) / self.scale;
        Pixel::new(c * dx + s * dy + self.center.u, -s * dx + c * dy + self.center.v)
    }
}

/// A composited sample already written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrRecord {
    pub index: usize,
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub source_frame: String,
    pub background: PathBuf,
    pub similarity: Similarity2D,
    pub keypoints: Vec<LabeledKeypoint>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub schema_version: u32,
    pub project_id: String,
    pub intrinsics: CameraIntrinsics,
    pub model: ModelRef,
    pub board: BoardSpec,
    #[serde(default)]
    pub sessions: Vec<Session>,
    #[serde(default)]
    pub dr: DrConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub randomized: Vec<DrRecord>,
}

impl ProjectManifest {
    pub fn new(project_id: impl Into<String>, intrinsics: CameraIntrinsics, model: ModelRef, board: BoardSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            project_id: project_id.into(),
            intrinsics,
            model,
            board,
            sessions: Vec::new(),
            dr: DrConfig::default(),
            split: SplitConfig::default(),
            randomized: Vec::new(),
        }
    }

    pub fn session(&self, id: &str) -> Result<&Session> {
        self.sessions.iter().find(|s| s.id == id).ok_or_else(|| Error::NotFound { kind: "session", id: id.to_string() })
    }

    pub fn session_mut(&mut self, id: &str) -> Result<&mut Session> {
        self.sessions
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::NotFound { kind: "session", id: id.to_string() })
    }

    /// `(session, frame)` for a frame id, searching every session.
    pub fn find_frame(&self, frame_id: &str) -> Result<(&Session, &FrameRecord)> {
        self.sessions
            .iter()
            .find_map(|s| s.frame(frame_id).map(|f| (s, f)))
            .ok_or_else(|| Error::NotFound { kind: "frame", id: frame_id.to_string() })
    }

    pub fn find_frame_mut(&mut self, frame_id: &str) -> Result<&mut FrameRecord> {
        self.sessions
            .iter_mut()
            .find_map(|s| s.frame_mut(frame_id))
            .ok_or_else(|| Error::NotFound { kind: "frame", id: frame_id.to_string() })
    }

    /// Structural checks, plus annotation ids against `model` when given.
    pub fn validate(&self, model: Option<&ObjectModel>) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.board.validate()?;
        self.dr.validate()?;
        if !(0.0..=1.0).contains(&self.split.val_fraction) {
            return Err(Error::invalid("split.val_fraction", "must lie in [0, 1]"));
        }
        let known: Option<HashSet<&str>> = model.map(|m| m.keypoint_ids().collect());
        let mut sessions = HashSet::new();
        let mut frames = HashSet::new();
        for (si, s) in self.sessions.iter().enumerate() {
            if !sessions.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("sessions[{si}].id"), format!("duplicate session `{}`", s.id)));
            }
            for (fi, f) in s.frames.iter().enumerate() {
                let path = format!("sessions[{si}].frames[{fi}]");
                if !frames.insert(f.frame_id.as_str()) {
                    return Err(Error::invalid(
                        format!("{path}.frame_id"),
                        format!("duplicate frame `{}`", f.frame_id),
                    ));
                }
                if let Some(a) = &f.annotations {
                    a.validate().map_err(|e| prefix_field(e, &format!("{path}.annotations")))?;
                    if let Some(known) = &known {
                        for (ki, k) in a.keypoints.iter().enumerate() {
                            if !known.contains(k.keypoint_id.as_str()) {
                                return Err(Error::invalid(
                                    format!("{path}.annotations.keypoints[{ki}].keypoint_id"),
                                    format!("unknown keypoint `{}`", k.keypoint_id),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidInput { field, reason } => Error::InvalidInput { field: format!("{prefix}.{field}"), reason },
        other => other,
    }
}
