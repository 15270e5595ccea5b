//! Point-to-point ICP of the model mesh against a scene cloud.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vec3};
use crate::model::{ObjectModel, PointCloud};
use crate::rigid_align::{horn_align, Correspondences3D};

use super::{PoseEstimate, PoseMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once an update moves the pose by less than both tolerances.
    pub tol_translation: f64,
    pub tol_rotation_deg: f64,
    /// Pairs farther apart than this are ignored; `None` means 5× the scene's
    /// median point spacing.
    pub gate: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iters: 30, tol_translation: 1e-5, tol_rotation_deg: 1e-3, gate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpTrace {
    /// Matched-pair RMS at the initial pose and after every update.
    pub rms_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub matched: usize,
}

struct Matching {
    pairs: Vec<(Vec3, Vec3)>,
    rms: f64,
}

/// Nearest-neighbour pairs within `gate`, closest first. With a `bound`, the
/// set is cut to the longest prefix whose RMS does not exceed it.
fn match_pairs(
    source: &[Vec3],
    pose: &RigidTransform,
    scene: &PointCloud,
    gate: f64,
    bound: Option<f64>,
) -> Option<Matching> {
    let mut found = Vec::with_capacity(source.len());
    for (k, s) in source.iter().enumerate() {
        let (i, d) = scene.nearest(&pose.transform_point(s))?;
        if d <= gate {
            found.push((d, k, i));
        }
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sq = 0.0;
    let mut keep = (0, 0.0);
    for (n, (d, _, _)) in found.iter().enumerate() {
        sq += d * d;
        let rms = (sq / (n + 1) as f64).sqrt();
        if bound.is_none_or(|b| rms <= b) {
            keep = (n + 1, rms);
        }
    }
    if keep.0 == 0 {
        return None;
    }
    found.truncate(keep.0);
    Some(Matching { pairs: found.iter().map(|&(_, k, i)| (source[k], scene.points()[i])).collect(), rms: keep.1 })
}

pub fn icp_refine(
    initial: &PoseEstimate,
    model: &ObjectModel,
    scene: &PointCloud,
    cfg: &IcpConfig,
) -> Result<PoseEstimate> {
    icp_refine_traced(initial, model, scene, cfg).map(|(e, _)| e)
}

/// ICP that also reports the matched-pair RMS of every iterate.
///
/// After each update the gated pairs are trimmed, farthest first, until their
/// RMS is no larger than the previous iterate's. The pairs matched before the
/// update always qualify: Horn alignment cannot raise their RMS, re-matching
/// to nearest neighbours cannot either, and dropping pairs beyond the gate only
/// lowers it. So the RMS never increases.
pub fn icp_refine_traced(
    initial: &PoseEstimate,
    model: &ObjectModel,
    scene: &PointCloud,
    cfg: &IcpConfig,
) -> Result<(PoseEstimate, IcpTrace)> {
    let gate = cfg.gate.unwrap_or_else(|| 5.0 * scene.median_spacing());
    if !(gate >= 0.0) {
        return Err(Error::invalid("gate", "must be non-negative"));
    }
    let source = model.outline_points();
    let mut pose = initial.pose;
    let mut current = match_pairs(&source, &pose, scene, gate, None).ok_or(Error::NoMatches)?;
    let mut trace =
        IcpTrace { rms_history: vec![current.rms], iterations: 0, converged: false, matched: current.pairs.len() };
    for _ in 0..cfg.max_iters {
        let Ok(aligned) = horn_align(&Correspondences3D::new(current.pairs.clone())) else {
            break;
        };
        let next_pose = aligned.transform;
        let Some(next) = match_pairs(&source, &next_pose, scene, gate, Some(current.rms)) else {
            // Only round-off can get here.
            trace.converged = true;
            break;
        };
        let dt = (next_pose.translation - pose.translation).norm();
        let dr = next_pose.angle_to(&pose).to_degrees();
        pose = next_pose;
        current = next;
        trace.iterations += 1;
        trace.rms_history.push(current.rms);
        if dt < cfg.tol_translation && dr < cfg.tol_rotation_deg {
            trace.converged = true;
            break;
        }
    }
    trace.matched = current.pairs.len();
    let estimate = PoseEstimate {
        pose,
        inlier_ids: initial.inlier_ids.clone(),
        method: PoseMethod::IcpRefined,
        residual: current.rms,
    };
    Ok((estimate, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::UnitQuat;
    use crate::model::ModelKeypoint;

    fn cube() -> ObjectModel {
        let mut v = Vec::new();
        let n = 8;
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    if [i, j, k].iter().any(|&c| c == 0 || c == n) {
                        v.push(Vec3::new(i as f64, j as f64 * 0.8, k as f64 * 0.6) * 0.01);
                    }
                }
            }
        }
        let kps = (0..4).map(|i| ModelKeypoint { id: format!("k{i}"), position: v[i * 7] }).collect();
        ObjectModel::new(kps, v, vec![]).unwrap()
    }

    fn estimate(pose: RigidTransform) -> PoseEstimate {
        PoseEstimate { pose, inlier_ids: vec![], method: PoseMethod::Procrustes3d, residual: 0.0 }
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let m = cube();
        let truth = RigidTransform::new(UnitQuat::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 0.8));
        let scene = PointCloud::new(m.mesh_vertices.iter().map(|p| truth.transform_point(p)).collect()).unwrap();
        let (est, trace) = icp_refine_traced(&estimate(truth), &m, &scene, &IcpConfig::default()).unwrap();
        assert!(trace.iterations <= 1);
        assert!((est.pose.translation - truth.translation).norm() < 1e-5);
        assert!(est.pose.angle_to(&truth).to_degrees() < 1e-3);
    }

    #[test]
    fn converges_from_small_offset() {
        let m = cube();
        let truth = RigidTransform::new(UnitQuat::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 0.8));
        let scene = PointCloud::new(m.mesh_vertices.iter().map(|p| truth.transform_point(p)).collect()).unwrap();
        let start = RigidTransform::new(
            UnitQuat::from_scaled_axis(Vec3::new(0.0, 0.0, 2f64.to_radians())) * truth.rotation(),
            truth.translation + Vec3::new(0.003, -0.004, 0.0),
        );
        let (est, trace) = icp_refine_traced(&estimate(start), &m, &scene, &IcpConfig::default()).unwrap();
        for w in trace.rms_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!((est.pose.translation - truth.translation).norm() < 1e-6);
        assert_eq!(est.method, PoseMethod::IcpRefined);
    }

    #[test]
    fn far_scene_has_no_matches() {
        let m = cube();
        let scene = PointCloud::new(m.mesh_vertices.iter().map(|p| p + Vec3::new(5.0, 0.0, 0.0)).collect()).unwrap();
        let r = icp_refine(&estimate(RigidTransform::identity()), &m, &scene, &IcpConfig::default());
        assert!(matches!(r, Err(Error::NoMatches)));
    }
}
