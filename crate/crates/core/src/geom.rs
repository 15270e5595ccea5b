//! Camera model, rigid transforms and rotation conventions.
//!
//! Conventions used throughout the crate:
//!
//! - Camera frame: `+z` forward, `+x` right, `+y` down. Pixel `(0, 0)` is the
//!   centre of the top-left pixel.
//! - A [`RigidTransform`] named `a_from_b` maps coordinates expressed in frame
//!   `b` into frame `a`. `camera_pose_in_marker` is `marker_from_camera`.
//! - Roll/pitch/yaw follow the intrinsic Z-Y-X order, `R = Rz(yaw) Ry(pitch) Rx(roll)`,
//!   reported in degrees. Everything else is in radians.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type UnitQuat = UnitQuaternion<f64>;

const QUAT_DRIFT_TOL: f64 = 1e-9;
const GIMBAL_TOL_DEG: f64 = 1e-6;

/// Sub-pixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Ideal pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    width: u32,
    height: u32,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(raw: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(raw.fx, raw.fy, raw.px, raw.py, raw.width, raw.height)
    }
}

impl From<CameraIntrinsics> for RawIntrinsics {
    fn from(k: CameraIntrinsics) -> Self {
        RawIntrinsics { fx: k.fx, fy: k.fy, px: k.px, py: k.py, width: k.width, height: k.height }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx.is_finite() && fx > 0.0) {
            return Err(Error::invalid("intrinsics.fx", "must be finite and > 0"));
        }
        if !(fy.is_finite() && fy > 0.0) {
            return Err(Error::invalid("intrinsics.fy", "must be finite and > 0"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("intrinsics.width", "image size must be positive"));
        }
        if !(px >= 0.0 && px < width as f64) {
            return Err(Error::invalid("intrinsics.px", "must lie in [0, width)"));
        }
        if !(py >= 0.0 && py < height as f64) {
            return Err(Error::invalid("intrinsics.py", "must lie in [0, height)"));
        }
        Ok(Self { fx, fy, px, py, width, height })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn px(&self) -> f64 {
        self.px
    }
    pub fn py(&self) -> f64 {
        self.py
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn principal_point(&self) -> Pixel {
        Pixel::new(self.px, self.py)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.px, 0.0, self.fy, self.py, 0.0, 0.0, 1.0)
    }

    /// Normalized image-plane coordinates `((u - px)/fx, (v - py)/fy, 1)`.
    pub fn bearing(&self, pixel: Pixel) -> Vec3 {
        Vec3::new((pixel.u - self.px) / self.fx, (pixel.v - self.py) / self.fy, 1.0)
    }

    /// True when the pixel centre lies inside the image.
    pub fn contains(&self, pixel: Pixel) -> bool {
        pixel.u >= -0.5 && pixel.v >= -0.5 && pixel.u < self.width as f64 - 0.5 && pixel.v < self.height as f64 - 0.5
    }
}

/// Projects a camera-frame point to pixels.
pub fn project(intr: &CameraIntrinsics, point_cam: &Vec3) -> Result<Pixel> {
    let z = point_cam.z;
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth { z });
    }
    Ok(Pixel::new(intr.px + intr.fx * point_cam.x / z, intr.py + intr.fy * point_cam.y / z))
}

/// Lifts a pixel at known depth `z` back to the camera frame.
pub fn backproject(intr: &CameraIntrinsics, pixel: Pixel, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth { z: depth });
    }
    Ok(Vec3::new(depth / intr.fx * (pixel.u - intr.px), depth / intr.fy * (pixel.v - intr.py), depth))
}

/// Half-line with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`; fails on zero or non-finite input.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) || !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("ray", "direction must be finite and non-zero"));
        }
        Ok(Self { origin, direction: direction / norm })
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Perpendicular distance from `p` to the supporting line.
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let d = p - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

/// Rotation + translation. Applying it to `p` gives `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct RigidTransform {
    rotation: UnitQuat,
    pub translation: Vec3,
}

/// On-disk layout: quaternion as `[w, x, y, z]`, translation in meters.
#[derive(Serialize, Deserialize)]
struct RawTransform {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl TryFrom<RawTransform> for RigidTransform {
    type Error = Error;

    fn try_from(raw: RawTransform) -> Result<Self> {
        let [w, x, y, z] = raw.rotation;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("rotation", "quaternion must have unit norm"));
        }
        let t = Vec3::from(raw.translation);
        if !t.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("translation", "must be finite"));
        }
        // Keep stored bits untouched when already unit so save/load is lossless.
        let q =
            if (norm - 1.0).abs() <= QUAT_DRIFT_TOL { UnitQuat::new_unchecked(q) } else { UnitQuat::new_normalize(q) };
        Ok(RigidTransform::new(q, t))
    }
}

impl From<RigidTransform> for RawTransform {
    fn from(t: RigidTransform) -> Self {
        let q = t.rotation.quaternion();
        RawTransform {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

/// Flips the quaternion sign so that `w >= 0`.
pub fn canonicalize(q: UnitQuat) -> UnitQuat {
    let q = if (q.norm() - 1.0).abs() > QUAT_DRIFT_TOL { UnitQuat::new_normalize(q.into_inner()) } else { q };
    if q.w < 0.0 {
        UnitQuat::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: UnitQuat, translation: Vec3) -> Self {
        Self { rotation: canonicalize(rotation), translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuat::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuat::identity(), t)
    }

    pub fn from_rotation(r: UnitQuat) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Builds from an (approximately) orthonormal rotation matrix.
    pub fn from_matrix(r: &Matrix3<f64>, t: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_eps(r, 1e-15, 100, nalgebra::Rotation3::identity());
        Self::new(UnitQuat::from_rotation_matrix(&rot), t)
    }

    pub fn rotation(&self) -> &UnitQuat {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn invert(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Angle of the relative rotation, radians in `[0, π]`.
    pub fn angle_to(&self, other: &RigidTransform) -> f64 {
        geodesic_angle(&self.rotation, &other.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|c| c.is_finite()) && self.rotation.coords.iter().all(|c| c.is_finite())
    }
}

/// `2 acos |<a, b>|`, radians.
pub fn geodesic_angle(a: &UnitQuat, b: &UnitQuat) -> f64 {
    // 4 atan2(|a - b|, |a + b|) after aligning signs; stable near 0 unlike acos.
    let s = if a.coords.dot(&b.coords) < 0.0 { -1.0 } else { 1.0 };
    let diff = (a.coords - b.coords * s).norm();
    let sum = (a.coords + b.coords * s).norm();
    4.0 * diff.atan2(sum)
}

/// Roll, pitch and yaw in degrees (intrinsic Z-Y-X).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Pitch within 1e-6° of ±90°; roll is then folded into yaw.
    #[serde(default)]
    pub gimbal_lock: bool,
}

impl Rpy {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw, gimbal_lock: false }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

pub fn rpy_from_quat(q: &UnitQuat) -> Rpy {
    let r = q.to_rotation_matrix().into_inner();
    let pitch = (-r[(2, 0)]).atan2(r[(0, 0)].hypot(r[(1, 0)]));
    let gimbal_lock = (pitch.abs().to_degrees() - 90.0).abs() < GIMBAL_TOL_DEG;
    let (roll, yaw) = if gimbal_lock {
        // Only roll ∓ yaw is observable; put it all into yaw.
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        (0.0, yaw)
    } else {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    };
    Rpy { roll: roll.to_degrees(), pitch: pitch.to_degrees(), yaw: yaw.to_degrees(), gimbal_lock }
}

pub fn quat_from_rpy(rpy: &Rpy) -> UnitQuat {
    canonicalize(UnitQuat::from_euler_angles(rpy.roll.to_radians(), rpy.pitch.to_radians(), rpy.yaw.to_radians()))
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
