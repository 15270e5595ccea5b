//! EPnP inside RANSAC.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, RigidTransform, Vec3};
use crate::model::ObjectModel;
use crate::reprojection::{mean_reprojection_error, refine_pose, reprojection_error};

use super::epnp::epnp_with_error;
use super::{Keypoint2D, PoseEstimate, PoseMethod};

const SAMPLE_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iters: usize,
    pub px_thresh: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Polish the final pose by Gauss-Newton on the inlier reprojection error.
    pub refine: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iters: 500, px_thresh: 2.0, min_inliers: 6, seed: 0, refine: true }
    }
}

fn inliers_of(pose: &RigidTransform, intr: &CameraIntrinsics, pts: &[Vec3], px: &[Pixel], thresh: f64) -> Vec<usize> {
    (0..pts.len()).filter(|&i| reprojection_error(pose, intr, &pts[i], &px[i]) < thresh).collect()
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Robust `camera_from_object` from 2D keypoints. Bit-deterministic for a
/// given `cfg.seed`.
pub fn pnp_ransac(
    keypoints: &[Keypoint2D],
    model: &ObjectModel,
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    if !(cfg.px_thresh > 0.0) {
        return Err(Error::invalid("px_thresh", "must be positive"));
    }
    let mut ids = Vec::with_capacity(keypoints.len());
    let mut pts = Vec::with_capacity(keypoints.len());
    let mut px = Vec::with_capacity(keypoints.len());
    for (i, k) in keypoints.iter().enumerate() {
        let p = model
            .keypoint(&k.keypoint_id)
            .ok_or_else(|| Error::NotFound { kind: "keypoint", id: k.keypoint_id.clone() })?;
        if ids.contains(&k.keypoint_id.as_str()) {
            return Err(Error::invalid(
                format!("keypoints[{i}].keypoint_id"),
                format!("duplicate keypoint `{}`", k.keypoint_id),
            ));
        }
        if !k.pixel.is_finite() {
            return Err(Error::invalid(format!("keypoints[{i}].pixel"), "must be finite"));
        }
        ids.push(k.keypoint_id.as_str());
        pts.push(*p);
        px.push(k.pixel);
    }
    let n = pts.len();
    if n < SAMPLE_SIZE {
        return Err(Error::InsufficientPoints { got: n, required: SAMPLE_SIZE });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // (inlier indices, mean inlier error)
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..cfg.iters {
        let idx = sample(&mut rng, n, SAMPLE_SIZE).into_vec();
        let r = epnp_with_error(&pick(&pts, &idx), &pick(&px, &idx), intr);
        let Ok((pose, _)) = r else {
            continue;
        };
        let inl = inliers_of(&pose, intr, &pts, &px, cfg.px_thresh);
        let err = mean_reprojection_error(&pose, intr, &pick(&pts, &inl), &pick(&px, &inl));
        let better = match &best {
            None => true,
            Some((b, e)) => inl.len() > b.len() || (inl.len() == b.len() && err < *e),
        };
        if better {
            let all = inl.len() == n;
            best = Some((inl, err));
            if all {
                break;
            }
        }
    }

    let Some((consensus, _)) = best else {
        return Err(Error::ConsensusFailure { inliers: 0, required: cfg.min_inliers });
    };
    if consensus.len() < cfg.min_inliers.max(SAMPLE_SIZE) {
        return Err(Error::ConsensusFailure { inliers: consensus.len(), required: cfg.min_inliers });
    }

    let fit = |set: &[usize]| -> Result<RigidTransform> {
        let (p, x) = (pick(&pts, set), pick(&px, set));
        let (pose, _) = epnp_with_error(&p, &x, intr)?;
        if cfg.refine {
            refine_pose(&pose, intr, &p, &x, 50)
        } else {
            Ok(pose)
        }
    };
    let mut set = consensus;
    let mut pose = fit(&set)?;
    // One re-selection pass: the refit pose may admit points the sample pose missed.
    let grown = inliers_of(&pose, intr, &pts, &px, cfg.px_thresh);
    if grown.len() > set.len() {
        set = grown;
        pose = fit(&set)?;
    }
    let residual = mean_reprojection_error(&pose, intr, &pick(&pts, &set), &pick(&px, &set));
    Ok(PoseEstimate {
        pose,
        inlier_ids: set.iter().map(|&i| ids[i].to_string()).collect(),
        method: PoseMethod::PnpRansac,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, UnitQuat};
    use crate::model::ModelKeypoint;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(seed: u64) -> (ObjectModel, RigidTransform, Vec<Keypoint2D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kps = (0..20)
            .map(|i| ModelKeypoint {
                id: format!("k{i}"),
                position: Vec3::new(
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.06..0.06),
                    rng.random_range(-0.04..0.04),
                ),
            })
            .collect();
        let model = ObjectModel::new(kps, vec![], vec![]).unwrap();
        let truth = RigidTransform::new(UnitQuat::from_euler_angles(0.3, 0.4, -0.2), Vec3::new(0.03, -0.02, 1.0));
        let obs = model
            .keypoints
            .iter()
            .map(|kp| Keypoint2D {
                keypoint_id: kp.id.clone(),
                pixel: project(&k(), &truth.transform_point(&kp.position)).unwrap(),
            })
            .collect();
        (model, truth, obs)
    }

    #[test]
    fn clean_input_keeps_everything() {
        let (model, truth, obs) = scene(1);
        let est = pnp_ransac(&obs, &model, &k(), &RansacConfig::default()).unwrap();
        assert_eq!(est.inlier_ids.len(), 20);
        assert!((est.pose.translation - truth.translation).norm() < 1e-9);
        assert_eq!(est.method, PoseMethod::PnpRansac);
    }

    #[test]
    fn planted_outliers_are_excluded() {
        let (model, truth, mut obs) = scene(2);
        for (i, o) in obs.iter_mut().enumerate().take(6) {
            let a = i as f64;
            o.pixel.u += 60.0 * a.cos() + 10.0;
            o.pixel.v += 60.0 * a.sin();
        }
        let est = pnp_ransac(&obs, &model, &k(), &RansacConfig::default()).unwrap();
        assert_eq!(est.inlier_ids.len(), 14);
        assert!(est.inlier_ids.iter().all(|id| id.trim_start_matches('k').parse::<usize>().unwrap() >= 6));
        assert!((est.pose.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn mostly_outliers_fail_consensus() {
        let (model, _, mut obs) = scene(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for o in obs.iter_mut().skip(2) {
            o.pixel = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let r = pnp_ransac(&obs, &model, &k(), &RansacConfig::default());
        assert!(matches!(r, Err(Error::ConsensusFailure { .. })), "{r:?}");
    }

    #[test]
    fn same_seed_same_bits() {
        let (model, _, mut obs) = scene(4);
        obs[0].pixel.u += 80.0;
        obs[1].pixel.v -= 90.0;
        let a = pnp_ransac(&obs, &model, &k(), &RansacConfig::default()).unwrap();
        let b = pnp_ransac(&obs, &model, &k(), &RansacConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
