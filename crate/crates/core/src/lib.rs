//! Keypoint-driven 6-DoF pose toolkit.
//!
//! Two jobs share the same geometry:
//!
//! - **Label generation.** A few manually clicked keypoints in frames with
//!   known camera poses are triangulated ([`triangulation`]), the object pose
//!   in the marker frame is recovered by rigid alignment ([`rigid_align`]),
//!   and labels are propagated to every frame of the session ([`labelgen`]).
//! - **Pose estimation.** 2D keypoints are turned into an object pose either
//!   by PnP + RANSAC or by lifting them onto a point cloud, rejecting
//!   inconsistent points spectrally and aligning to the model ([`robust_pose`]).
//!
//! [`synth`] generates deterministic synthetic scenes used as test oracles.

pub mod error;
pub mod geom;
pub mod io;
pub mod labelgen;
pub mod model;
pub mod raster;
pub mod reprojection;
pub mod rigid_align;
pub mod robust_pose;
pub mod synth;
pub mod triangulation;

pub use error::{Error, ErrorKind, Result};
pub use geom::{
    backproject, project, quat_from_rpy, rpy_from_quat, CameraIntrinsics, Pixel, Ray, RigidTransform, Rpy, UnitQuat,
    Vec3,
};
pub use model::{ModelKeypoint, ObjectModel, PointCloud};
pub use rigid_align::{horn_align, max_eigvec_sym4, Alignment, Correspondences3D};
pub use robust_pose::{PoseEstimate, PoseMethod};
pub use triangulation::{
    pixel_ray, triangulate_keypoints, triangulate_point, AnnotatedKeypoint, AnnotationSet, Keypoint3D,
    TriangulationReport,
};

/// Current version of every persisted JSON document.
pub const SCHEMA_VERSION: u32 = 1;
