//! Runtime pose estimation from 2D keypoints.
//!
//! Two branches:
//!
//! - [`pnp_ransac`]: EPnP inside RANSAC on the 2D keypoints directly.
//! - [`lift_keypoints`] → [`spectral_inliers`] → [`pose_procrustes_3d`]:
//!   lift each keypoint onto the scene point cloud, drop pairwise-inconsistent
//!   points, then align the model keypoints to the survivors. [`icp_refine`]
//!   optionally polishes either result against the cloud.

mod depth;
mod epnp;
mod icp;
mod ransac;
mod spectral;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use depth::{keypoint_depth, lift_keypoints, DepthConfig, DroppedKeypoint, LiftReport, LiftedKeypoint};
pub use epnp::{epnp, SOLVER_FAILURE_PX};
pub use icp::{icp_refine, icp_refine_traced, IcpConfig, IcpTrace};
pub use ransac::{pnp_ransac, RansacConfig};
pub use spectral::{affinity_matrix, spectral_inliers, SpectralConfig};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, RigidTransform};
use crate::model::{ObjectModel, PointCloud};
use crate::rigid_align::{horn_align, Correspondences3D};
use crate::triangulation::AnnotatedKeypoint;

/// A detected 2D keypoint.
pub type Keypoint2D = AnnotatedKeypoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMethod {
    PnpRansac,
    #[serde(rename = "procrustes_3d")]
    Procrustes3d,
    IcpRefined,
}

/// Object pose in the camera frame (`camera_from_object`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub inlier_ids: Vec<String>,
    pub method: PoseMethod,
    /// Mean reprojection error in pixels for `pnp_ransac`, RMS 3D residual in
    /// meters otherwise.
    pub residual: f64,
}

/// Aligns model keypoints onto the observed camera-frame points.
pub fn pose_procrustes_3d(observed: &[LiftedKeypoint], model: &ObjectModel) -> Result<PoseEstimate> {
    let pairs = observed
        .iter()
        .map(|o| {
            model
                .keypoint(&o.keypoint_id)
                .map(|m| (*m, o.position))
                .ok_or_else(|| Error::NotFound { kind: "keypoint", id: o.keypoint_id.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let aligned = horn_align(&Correspondences3D::new(pairs))?;
    Ok(PoseEstimate {
        pose: aligned.transform,
        inlier_ids: observed.iter().map(|o| o.keypoint_id.clone()).collect(),
        method: PoseMethod::Procrustes3d,
        residual: aligned.rmsd,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Branch3dConfig {
    pub depth: DepthConfig,
    pub spectral: SpectralConfig,
}

/// Lift → spectral rejection → Procrustes.
pub fn estimate_from_cloud(
    keypoints: &[Keypoint2D],
    model: &ObjectModel,
    intr: &CameraIntrinsics,
    cloud: &PointCloud,
    cfg: &Branch3dConfig,
) -> Result<PoseEstimate> {
    let lifted = lift_keypoints(keypoints, intr, cloud, &cfg.depth)?;
    let known: Vec<LiftedKeypoint> =
        lifted.lifted.into_iter().filter(|k| model.keypoint(&k.keypoint_id).is_some()).collect();
    let inliers = spectral_inliers(&known, model, &cfg.spectral)?;
    let by_id: HashMap<&str, &LiftedKeypoint> = known.iter().map(|k| (k.keypoint_id.as_str(), k)).collect();
    let kept: Vec<LiftedKeypoint> = inliers.iter().map(|id| by_id[id.as_str()].clone()).collect();
    pose_procrustes_3d(&kept, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{UnitQuat, Vec3};
    use crate::model::ModelKeypoint;

    fn model() -> ObjectModel {
        let pts =
            [(0.0, 0.0, 0.0), (0.1, 0.0, 0.0), (0.0, 0.1, 0.0), (0.0, 0.0, 0.1), (0.1, 0.1, 0.05), (0.05, 0.0, 0.0)];
        let kps = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ModelKeypoint { id: format!("k{i}"), position: Vec3::new(p.0, p.1, p.2) })
            .collect();
        ObjectModel::new(kps, vec![], vec![]).unwrap()
    }

    #[test]
    fn procrustes_recovers_exact_pose() {
        let m = model();
        let truth = RigidTransform::new(UnitQuat::from_euler_angles(0.3, 0.1, -0.4), Vec3::new(0.1, 0.0, 0.9));
        let observed: Vec<LiftedKeypoint> = m
            .keypoints
            .iter()
            .map(|k| LiftedKeypoint { keypoint_id: k.id.clone(), position: truth.transform_point(&k.position) })
            .collect();
        let est = pose_procrustes_3d(&observed, &m).unwrap();
        assert!((est.pose.translation - truth.translation).norm() < 1e-12);
        assert!(est.pose.angle_to(&truth) < 1e-10);
        assert!(est.residual < 1e-12);
        assert_eq!(est.method, PoseMethod::Procrustes3d);
    }

    #[test]
    fn procrustes_collinear_is_degenerate() {
        let m = model();
        let observed: Vec<LiftedKeypoint> = ["k0", "k1", "k5"]
            .iter()
            .map(|id| LiftedKeypoint {
                keypoint_id: id.to_string(),
                position: *m.keypoint(id).unwrap() + Vec3::new(0.0, 0.0, 1.0),
            })
            .collect();
        assert!(matches!(pose_procrustes_3d(&observed, &m), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn method_serializes_snake_case() {
        assert_eq!(serde_json::to_string(&PoseMethod::PnpRansac).unwrap(), "\"pnp_ransac\"");
        assert_eq!(serde_json::to_string(&PoseMethod::Procrustes3d).unwrap(), "\"procrustes_3d\"");
    }
}
