//! Multi-view keypoint triangulation.
//!
//! Every annotated pixel defines a ray from the camera centre through the
//! keypoint. The triangulated point `Q` minimizes the summed squared
//! perpendicular distance to all rays of a keypoint, which has the closed form
//!
//! ```text
//! Q = (Σ_l (I - v_l v_lᵀ))⁻¹ Σ_l (I - v_l v_lᵀ) T_l
//! ```
//!
//! with `T_l` the camera centre and `v_l` the unit ray direction of view `l`.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, Ray, RigidTransform, Vec3};

/// Above this the normal matrix is treated as singular (near-parallel rays).
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedKeypoint {
    pub keypoint_id: String,
    pub pixel: Pixel,
}

/// Manually clicked keypoints of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub frame_id: String,
    pub keypoints: Vec<AnnotatedKeypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

impl AnnotationSet {
    pub fn new(frame_id: impl Into<String>) -> Self {
        Self { frame_id: frame_id.into(), ..Default::default() }
    }

    /// Adds or replaces the click for `keypoint_id`.
    pub fn set(&mut self, keypoint_id: impl Into<String>, pixel: Pixel) {
        let keypoint_id = keypoint_id.into();
        match self.keypoints.iter_mut().find(|k| k.keypoint_id == keypoint_id) {
            Some(k) => k.pixel = pixel,
            None => self.keypoints.push(AnnotatedKeypoint { keypoint_id, pixel }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, k) in self.keypoints.iter().enumerate() {
            if !seen.insert(k.keypoint_id.as_str()) {
                return Err(Error::invalid(
                    format!("keypoints[{i}].keypoint_id"),
                    format!("duplicate keypoint `{}` in frame `{}`", k.keypoint_id, self.frame_id),
                ));
            }
            if !k.pixel.is_finite() {
                return Err(Error::invalid(format!("keypoints[{i}].pixel"), "must be finite"));
            }
        }
        Ok(())
    }
}

/// Triangulated keypoint in the marker frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint3D {
    pub keypoint_id: String,
    pub position: Vec3,
    pub residual_rms: f64,
    pub n_rays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedKeypoint {
    pub keypoint_id: String,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationReport {
    pub keypoints: Vec<Keypoint3D>,
    pub skipped: Vec<SkippedKeypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayIntersection {
    pub position: Vec3,
    /// RMS perpendicular distance from `position` to the rays, meters.
    pub residual_rms: f64,
}

/// Ray through `pixel`, expressed in the marker frame.
pub fn pixel_ray(camera_pose_in_marker: &RigidTransform, intr: &CameraIntrinsics, pixel: Pixel) -> Ray {
    let dir = camera_pose_in_marker.transform_vector(&intr.bearing(pixel));
    Ray::new(camera_pose_in_marker.translation, dir).expect("bearing is never zero")
}

fn projector(ray: &Ray) -> Matrix3<f64> {
    let v = ray.direction();
    Matrix3::identity() - v * v.transpose()
}

/// Least-squares closest point to a bundle of at least two rays.
pub fn triangulate_point(rays: &[Ray]) -> Result<RayIntersection> {
    if rays.len() < 2 {
        return Err(Error::InsufficientPoints { got: rays.len(), required: 2 });
    }
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for ray in rays {
        let p = projector(ray);
        a += p;
        b += p * ray.origin;
    }
    // A is symmetric PSD; its eigenvalues give the condition number directly.
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::DegenerateRays { keypoint: None, condition });
    }
    let chol = a.cholesky().ok_or(Error::DegenerateRays { keypoint: None, condition })?;
    let position = chol.solve(&b);
    let sq: f64 = rays.iter().map(|r| r.distance_to(&position).powi(2)).sum();
    Ok(RayIntersection { position, residual_rms: (sq / rays.len() as f64).sqrt() })
}

/// Triangulates every keypoint observed in at least two annotated frames.
///
/// Keypoints seen only once are listed in `skipped`. Output is sorted by id.
pub fn triangulate_keypoints(
    annotations: &[AnnotationSet],
    camera_poses: &HashMap<String, RigidTransform>,
    intr: &CameraIntrinsics,
) -> Result<TriangulationReport> {
    let mut rays: BTreeMap<&str, Vec<Ray>> = BTreeMap::new();
    for set in annotations {
        set.validate()?;
        if set.keypoints.is_empty() {
            continue;
        }
        let pose =
            camera_poses.get(&set.frame_id).ok_or_else(|| Error::MissingCameraPose { frame: set.frame_id.clone() })?;
        for k in &set.keypoints {
            rays.entry(&k.keypoint_id).or_default().push(pixel_ray(pose, intr, k.pixel));
        }
    }

    let mut keypoints = Vec::new();
    let mut skipped = Vec::new();
    for (id, bundle) in rays {
        if bundle.len() < 2 {
            skipped.push(SkippedKeypoint { keypoint_id: id.to_string(), observations: bundle.len() });
            continue;
        }
        let hit = triangulate_point(&bundle).map_err(|e| match e {
            Error::DegenerateRays { condition, .. } => {
                Error::DegenerateRays { keypoint: Some(id.to_string()), condition }
            }
            other => other,
        })?;
        keypoints.push(Keypoint3D {
            keypoint_id: id.to_string(),
            position: hit.position,
            residual_rms: hit.residual_rms,
            n_rays: bundle.len(),
        });
    }
    if keypoints.is_empty() {
        return Err(Error::NoTriangulableKeypoints);
    }
    Ok(TriangulationReport { keypoints, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::UnitQuat;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray::new(Vec3::from(o), Vec3::from(d)).unwrap()
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn pixel_ray_at_principal_point() {
        let k = intr();
        let r = pixel_ray(&RigidTransform::identity(), &k, k.principal_point());
        assert_eq!(r.origin, Vec3::zeros());
        assert_eq!(*r.direction(), Vec3::z());
        let pose = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -1.0));
        let r = pixel_ray(&pose, &k, k.principal_point());
        assert_eq!(r.origin, Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(*r.direction(), Vec3::z());
    }

    #[test]
    fn backprojected_point_lies_on_ray() {
        let k = intr();
        let pose = RigidTransform::new(UnitQuat::from_euler_angles(0.3, -0.7, 1.9), Vec3::new(0.4, -1.2, 0.8));
        let px = Pixel::new(101.5, 377.25);
        let r = pixel_ray(&pose, &k, px);
        for depth in [0.3, 1.0, 4.5] {
            let p_cam = crate::geom::backproject(&k, px, depth).unwrap();
            let p = pose.transform_point(&p_cam);
            assert!(r.distance_to(&p) < 1e-9);
        }
    }

    #[test]
    fn exact_intersection() {
        let s = 0.5f64.sqrt();
        let hit = triangulate_point(&[ray([0.0; 3], [0.0, 0.0, 1.0]), ray([1.0, 0.0, 0.0], [-s, 0.0, s])]).unwrap();
        assert_relative_eq!(hit.position, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert!(hit.residual_rms < 1e-12);
    }

    #[test]
    fn skew_midpoint() {
        let hit = triangulate_point(&[ray([0.0; 3], [1.0, 0.0, 0.0]), ray([0.0, 1.0, 1.0], [0.0, 0.0, 1.0])]).unwrap();
        assert_relative_eq!(hit.position, Vec3::new(0.0, 0.5, 0.0), epsilon = 1e-12);
        assert_relative_eq!(hit.residual_rms, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let err =
            triangulate_point(&[ray([0.0; 3], [0.0, 0.0, 1.0]), ray([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRays { .. }));
        assert!(triangulate_point(&[ray([0.0; 3], [0.0, 0.0, 1.0])]).is_err());
    }

    #[test]
    fn single_observation_is_skipped() {
        let k = intr();
        let mut poses = HashMap::new();
        poses.insert("a".to_string(), RigidTransform::identity());
        poses.insert("b".to_string(), RigidTransform::from_translation(Vec3::new(0.2, 0.0, 0.0)));
        let target = Vec3::new(0.05, -0.02, 1.0);
        let mut sets = Vec::new();
        for (frame, pose) in &poses {
            let mut set = AnnotationSet::new(frame.clone());
            let p = crate::geom::project(&k, &pose.invert().transform_point(&target)).unwrap();
            set.set("tip", p);
            if frame == "a" {
                set.set("handle", Pixel::new(10.0, 10.0));
            }
            sets.push(set);
        }
        let report = triangulate_keypoints(&sets, &poses, &k).unwrap();
        assert_eq!(report.keypoints.len(), 1);
        assert_relative_eq!(report.keypoints[0].position, target, epsilon = 1e-9);
        assert_eq!(report.skipped, vec![SkippedKeypoint { keypoint_id: "handle".into(), observations: 1 }]);
    }

    #[test]
    fn nothing_triangulable() {
        let k = intr();
        let mut poses = HashMap::new();
        poses.insert("a".to_string(), RigidTransform::identity());
        let mut set = AnnotationSet::new("a");
        set.set("tip", Pixel::new(1.0, 2.0));
        assert!(matches!(triangulate_keypoints(&[set], &poses, &k), Err(Error::NoTriangulableKeypoints)));
    }

    #[test]
    fn missing_pose_and_duplicate_ids() {
        let k = intr();
        let mut set = AnnotationSet::new("ghost");
        set.set("tip", Pixel::new(1.0, 2.0));
        assert!(matches!(
            triangulate_keypoints(&[set.clone()], &HashMap::new(), &k),
            Err(Error::MissingCameraPose { .. })
        ));
        set.keypoints.push(set.keypoints[0].clone());
        assert!(set.validate().is_err());
    }

    fn bundle_through(q: Vec3, origins: &[Vec3]) -> Vec<Ray> {
        origins.iter().map(|o| Ray::new(*o, q - o).unwrap()).collect()
    }

    proptest! {
        #[test]
        fn permutation_and_duplicates_keep_consistent_intersection(
            qx in -1.0..1.0f64, qy in -1.0..1.0f64, qz in -1.0..1.0f64,
            seeds in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 3..7),
            rot in 0usize..7, dup in 0usize..7,
        ) {
            let q = Vec3::new(qx, qy, qz);
            let origins: Vec<Vec3> = seeds.iter().map(|&(x, y, z)| Vec3::new(x, y, z) * 1.0 + Vec3::new(0.0, 0.0, 5.0)).collect();
            let rays = bundle_through(q, &origins);
            let Ok(base) = triangulate_point(&rays) else { return Ok(()); };
            prop_assert!((base.position - q).norm() < 1e-9);

            let mut rotated = rays.clone();
            rotated.rotate_left(rot % rays.len());
            rotated.reverse();
            let p = triangulate_point(&rotated).unwrap();
            prop_assert!((p.position - base.position).norm() < 1e-9);

            let mut with_dup = rays.clone();
            with_dup.push(rays[dup % rays.len()]);
            let d = triangulate_point(&with_dup).unwrap();
            prop_assert!((d.position - base.position).norm() < 1e-9);
        }
    }
}
