//! Reprojection residuals and Gauss-Newton pose refinement.

use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::geom::{project, skew, CameraIntrinsics, Pixel, RigidTransform, UnitQuat, Vec3};

/// Pixel distance between `project(camera_from_object * X)` and the
/// observation; `f64::INFINITY` for points at or behind the camera.
pub fn reprojection_error(
    camera_from_object: &RigidTransform,
    intr: &CameraIntrinsics,
    point: &Vec3,
    observed: &Pixel,
) -> f64 {
    match project(intr, &camera_from_object.transform_point(point)) {
        Ok(p) => p.distance(observed),
        Err(_) => f64::INFINITY,
    }
}

pub fn mean_reprojection_error(
    camera_from_object: &RigidTransform,
    intr: &CameraIntrinsics,
    points: &[Vec3],
    pixels: &[Pixel],
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().zip(pixels).map(|(x, u)| reprojection_error(camera_from_object, intr, x, u)).sum::<f64>()
        / points.len() as f64
}

/// Damped Gauss-Newton on the summed squared reprojection error.
///
/// The update is a left perturbation `R ← exp(δω) R`, `t ← t + δt`. A step is
/// kept only when it lowers the cost.
pub fn refine_pose(
    initial: &RigidTransform,
    intr: &CameraIntrinsics,
    points: &[Vec3],
    pixels: &[Pixel],
    max_iters: usize,
) -> Result<RigidTransform> {
    if points.len() != pixels.len() {
        return Err(Error::invalid("pixels", "one pixel per point required"));
    }
    if points.len() < 3 {
        return Err(Error::InsufficientPoints { got: points.len(), required: 3 });
    }
    let cost = |t: &RigidTransform| -> f64 {
        points.iter().zip(pixels).map(|(x, u)| reprojection_error(t, intr, x, u).powi(2)).sum()
    };

    let mut pose = *initial;
    let mut current = cost(&pose);
    let mut lambda = 1e-6;
    for _ in 0..max_iters {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (x, u) in points.iter().zip(pixels) {
            let rx = pose.rotation() * x;
            let pc = rx + pose.translation;
            if pc.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / pc.z;
            let ru = intr.px() + intr.fx() * pc.x * iz - u.u;
            let rv = intr.py() + intr.fy() * pc.y * iz - u.v;
            let du = nalgebra::RowVector3::new(intr.fx() * iz, 0.0, -intr.fx() * pc.x * iz * iz);
            let dv = nalgebra::RowVector3::new(0.0, intr.fy() * iz, -intr.fy() * pc.y * iz * iz);
            let dp_dw = -skew(&rx);
            let mut ju = Vector6::zeros();
            let mut jv = Vector6::zeros();
            ju.fixed_rows_mut::<3>(0).copy_from(&(du * dp_dw).transpose());
            ju.fixed_rows_mut::<3>(3).copy_from(&du.transpose());
            jv.fixed_rows_mut::<3>(0).copy_from(&(dv * dp_dw).transpose());
            jv.fixed_rows_mut::<3>(3).copy_from(&dv.transpose());
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let dw = Vec3::new(step[0], step[1], step[2]);
            let dt = Vec3::new(step[3], step[4], step[5]);
            let candidate =
                RigidTransform::new(UnitQuat::from_scaled_axis(dw) * pose.rotation(), pose.translation + dt);
            let c = cost(&candidate);
            if c < current {
                let converged = step.norm() < 1e-14 * (1.0 + pose.translation.norm());
                pose = candidate;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refine_recovers_perturbed_pose() {
        let k = CameraIntrinsics::new(600.0, 610.0, 320.0, 240.0, 640, 480).unwrap();
        let truth = RigidTransform::new(UnitQuat::from_euler_angles(0.1, -0.2, 0.3), Vec3::new(0.05, -0.02, 0.8));
        let points: Vec<Vec3> = (0..12)
            .map(|i| {
                let a = i as f64 * 0.7;
                Vec3::new(0.1 * a.cos(), 0.1 * a.sin(), 0.03 * (i % 3) as f64)
            })
            .collect();
        let pixels: Vec<Pixel> = points.iter().map(|p| project(&k, &truth.transform_point(p)).unwrap()).collect();
        let start = RigidTransform::new(
            UnitQuat::from_euler_angles(0.12, -0.18, 0.33),
            truth.translation + Vec3::new(0.01, 0.01, -0.02),
        );
        let refined = refine_pose(&start, &k, &points, &pixels, 50).unwrap();
        assert!((refined.translation - truth.translation).norm() < 1e-9);
        assert!(refined.angle_to(&truth) < 1e-9);
        assert!(mean_reprojection_error(&refined, &k, &points, &pixels) < 1e-8);
    }
}
