//! Lifting 2D keypoints onto a camera-frame point cloud.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{backproject, CameraIntrinsics, Pixel, Vec3};
use crate::model::PointCloud;

use super::Keypoint2D;

/// Smallest cylinder radius used when it is derived from the cloud, meters.
pub const MIN_RADIUS: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthConfig {
    /// Ray cylinder radius in meters; `None` derives it from the cloud.
    pub r_cyl: Option<f64>,
    /// Snap the hit onto a plane fitted around the nearest candidate.
    pub refine_plane: bool,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self { r_cyl: None, refine_plane: true }
    }
}

impl DepthConfig {
    pub fn radius_for(&self, cloud: &PointCloud) -> f64 {
        self.r_cyl.unwrap_or_else(|| (2.0 * cloud.median_spacing()).max(MIN_RADIUS))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedKeypoint {
    pub keypoint_id: String,
    /// Camera frame, meters.
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedKeypoint {
    pub keypoint_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub lifted: Vec<LiftedKeypoint>,
    pub dropped: Vec<DroppedKeypoint>,
}

/// Depth `T_z` where the pixel ray meets the cloud.
///
/// Candidates are cloud points within `r_cyl` of the ray; the one with the
/// smallest `z` wins. With `refine_plane`, candidates are visited front to
/// back and a plane is fitted to the cloud around each; the first plane whose
/// ray intersection has a cloud point within `r_cyl` gives the depth. This
/// removes the `r_cyl / tan(incidence)` bias on oblique faces and skips
/// surfaces that the ray only grazes past. Without a supported plane the
/// nearest candidate's own depth is returned.
pub fn keypoint_depth(pixel: Pixel, intr: &CameraIntrinsics, cloud: &PointCloud, cfg: &DepthConfig) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::invalid("cloud", "point cloud is empty"));
    }
    if !pixel.is_finite() {
        return Err(Error::invalid("pixel", "must be finite"));
    }
    let r = cfg.radius_for(cloud);
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid("r_cyl", "must be positive"));
    }
    let dir = intr.bearing(pixel).normalize();
    let r2 = r * r;
    let mut candidates: Vec<&Vec3> = cloud
        .points()
        .iter()
        .filter(|p| {
            let t = p.dot(&dir);
            t > 0.0 && p.norm_squared() - t * t < r2
        })
        .collect();
    candidates.sort_by(|a, b| a.z.total_cmp(&b.z));
    let nearest = *candidates.first().ok_or(Error::NoIntersection)?;
    if cfg.refine_plane {
        let mut tried: Vec<&Vec3> = Vec::new();
        for c in candidates {
            if tried.iter().any(|t| (*t - c).norm() < r) {
                continue;
            }
            tried.push(c);
            if let Some(z) = plane_hit(cloud, c, &dir, r) {
                return Ok(z);
            }
        }
    }
    Ok(nearest.z)
}

/// Least-squares plane through the cloud within `reach` of `center`, if the
/// neighbourhood is flat.
fn fit_plane(cloud: &PointCloud, center: &Vec3, reach: f64) -> Option<(Vec3, Vec3)> {
    let idx = cloud.within(center, reach);
    if idx.len() < 6 {
        return None;
    }
    let pts = cloud.points();
    let n = idx.len() as f64;
    let centroid = idx.iter().map(|&i| pts[i]).sum::<Vec3>() / n;
    let mut scatter = Matrix3::zeros();
    for &i in &idx {
        let d = pts[i] - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let (k, &lmin) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    if (lmin.max(0.0) / n).sqrt() > 0.08 * reach {
        return None;
    }
    Some((eig.eigenvectors.column(k).into(), centroid))
}

fn plane_hit(cloud: &PointCloud, candidate: &Vec3, dir: &Vec3, r: f64) -> Option<f64> {
    let reach = 3.0 * r;
    let mut center = *candidate;
    for _ in 0..4 {
        let (normal, centroid) = fit_plane(cloud, &center, reach)?;
        let cos = normal.dot(dir);
        if cos.abs() <= 1e-3 {
            return None;
        }
        let t = normal.dot(&centroid) / cos;
        if !(t > 0.0) {
            return None;
        }
        let hit = dir * t;
        let moved = (hit - center).norm();
        center = hit;
        if moved <= 0.5 * r {
            break;
        }
    }
    let (_, d) = cloud.nearest(&center)?;
    if d > r {
        return None;
    }
    // The plane must also hold at the hit itself.
    let (normal, centroid) = fit_plane(cloud, &center, reach)?;
    ((center - centroid).dot(&normal).abs() <= 0.25 * r).then_some(center.z)
}

/// Backprojects every keypoint at its cloud depth. Keypoints whose rays miss
/// the cloud are dropped with a reason.
pub fn lift_keypoints(
    keypoints: &[Keypoint2D],
    intr: &CameraIntrinsics,
    cloud: &PointCloud,
    cfg: &DepthConfig,
) -> Result<LiftReport> {
    let mut lifted = Vec::with_capacity(keypoints.len());
    let mut dropped = Vec::new();
    for k in keypoints {
        match keypoint_depth(k.pixel, intr, cloud, cfg).and_then(|z| backproject(intr, k.pixel, z)) {
            Ok(position) => lifted.push(LiftedKeypoint { keypoint_id: k.keypoint_id.clone(), position }),
            Err(e @ (Error::NoIntersection | Error::NonPositiveDepth { .. })) => {
                dropped.push(DroppedKeypoint { keypoint_id: k.keypoint_id.clone(), reason: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    if lifted.len() < 4 {
        return Err(Error::TooFewLifted { lifted: lifted.len(), required: 4 });
    }
    Ok(LiftReport { lifted, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn plane(z: f64, half: f64, step: f64) -> PointCloud {
        let n = (2.0 * half / step).round() as i64;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                pts.push(Vec3::new(-half + i as f64 * step, -half + j as f64 * step, z));
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn frontal_plane_at_principal_point() {
        let cloud = plane(1.0, 0.2, 0.005);
        let z = keypoint_depth(Pixel::new(320.0, 240.0), &k(), &cloud, &DepthConfig::default()).unwrap();
        assert!((z - 1.0).abs() < 0.005);
        let raw = DepthConfig { refine_plane: false, ..Default::default() };
        let z = keypoint_depth(Pixel::new(333.3, 251.7), &k(), &cloud, &raw).unwrap();
        assert!((z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_the_cloud_is_no_intersection() {
        let cloud = plane(1.0, 0.05, 0.005);
        let r = keypoint_depth(Pixel::new(600.0, 20.0), &k(), &cloud, &DepthConfig::default());
        assert!(matches!(r, Err(Error::NoIntersection)));
    }

    #[test]
    fn tilted_plane_is_refined_exactly() {
        // Plane z = 1 + 0.5 x sampled on a 4 mm grid.
        let mut pts = Vec::new();
        for i in -50..=50 {
            for j in -50..=50 {
                let x = i as f64 * 0.004;
                pts.push(Vec3::new(x, j as f64 * 0.004, 1.0 + 0.5 * x));
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let px = Pixel::new(371.3, 222.9);
        let z = keypoint_depth(px, &k(), &cloud, &DepthConfig::default()).unwrap();
        let b = k().bearing(px);
        let expected = 1.0 / (1.0 - 0.5 * b.x);
        assert!((z - expected).abs() < 1e-12, "{z} vs {expected}");
    }

    #[test]
    fn lift_matches_backprojection() {
        let cloud = plane(1.0, 0.3, 0.005);
        let kps = [(370.0, 240.0), (320.0, 240.0), (300.0, 200.0), (350.0, 260.0)]
            .iter()
            .enumerate()
            .map(|(i, &(u, v))| Keypoint2D { keypoint_id: format!("k{i}"), pixel: Pixel::new(u, v) })
            .collect::<Vec<_>>();
        let report = lift_keypoints(&kps, &k(), &cloud, &DepthConfig::default()).unwrap();
        assert!((report.lifted[0].position - Vec3::new(0.1, 0.0, 1.0)).norm() < 1e-12);
        assert!(report.dropped.is_empty());
    }

    #[test]
    fn all_misses_is_too_few_lifted() {
        let cloud = plane(1.0, 0.01, 0.005);
        let kps: Vec<Keypoint2D> = (0..5)
            .map(|i| Keypoint2D { keypoint_id: format!("k{i}"), pixel: Pixel::new(10.0 + i as f64, 10.0) })
            .collect();
        assert!(matches!(
            lift_keypoints(&kps, &k(), &cloud, &DepthConfig::default()),
            Err(Error::TooFewLifted { lifted: 0, .. })
        ));
    }
}
