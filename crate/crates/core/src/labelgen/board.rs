//! Camera pose from a planar checkerboard.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, RigidTransform, Vec3};
use crate::reprojection::{mean_reprojection_error, refine_pose};

use super::manifest::BoardSpec;

/// Mean corner reprojection error above which a pose is flagged.
pub const HIGH_RESIDUAL_PX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardPose {
    /// `marker_from_camera`.
    pub camera_pose_in_marker: RigidTransform,
    pub mean_reprojection_px: f64,
    pub high_residual: bool,
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to √2.
fn normalizer(pts: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::DegenerateHomography("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn collinear(pts: &[(f64, f64)]) -> bool {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    !(lmin > 1e-12 * lmax)
}

/// Normalized DLT homography mapping plane points to pixels.
pub fn homography(plane: &[(f64, f64)], pixels: &[Pixel]) -> Result<Matrix3<f64>> {
    if plane.len() != pixels.len() {
        return Err(Error::invalid("corners", "one pixel per board corner required"));
    }
    if plane.len() < 4 {
        return Err(Error::InsufficientPoints { got: plane.len(), required: 4 });
    }
    let img: Vec<(f64, f64)> = pixels.iter().map(|p| (p.u, p.v)).collect();
    if collinear(&img) {
        return Err(Error::DegenerateHomography("corners are collinear".into()));
    }
    if collinear(plane) {
        return Err(Error::DegenerateHomography("board points are collinear".into()));
    }
    let ta = normalizer(plane)?;
    let tb = normalizer(&img)?;
    let n = plane.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let p = ta * Vector3::new(plane[i].0, plane[i].1, 1.0);
        let q = tb * Vector3::new(img[i].0, img[i].1, 1.0);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    // Null vector of A = eigenvector of AᵀA with the smallest eigenvalue.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).expect("nine eigenvalues");
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tb_inv = tb.try_inverse().ok_or_else(|| Error::DegenerateHomography("singular normalization".into()))?;
    let hm = tb_inv * hn * ta;
    if !hm.iter().all(|x| x.is_finite()) || hm.determinant().abs() < 1e-300 {
        return Err(Error::DegenerateHomography("rank-deficient homography".into()));
    }
    Ok(hm)
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Recovers `marker_from_camera` from detected inner corners listed in
/// row-major board order.
///
/// The homography is decomposed through `K⁻¹` into an initial pose, which is
/// then refined by Gauss-Newton on the corner reprojection error.
pub fn camera_pose_from_board(corners: &[Pixel], board: &BoardSpec, intr: &CameraIntrinsics) -> Result<BoardPose> {
    board.validate()?;
    if corners.len() != board.corner_count() {
        return Err(Error::invalid(
            "corners",
            format!("expected {} corners, got {}", board.corner_count(), corners.len()),
        ));
    }
    if let Some(i) = corners.iter().position(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("corners[{i}]"), "must be finite"));
    }
    let pts3 = board.corner_points();
    let plane: Vec<(f64, f64)> = pts3.iter().map(|p| (p.x, p.y)).collect();
    let h = homography(&plane, corners)?;

    let k_inv = intr.matrix().try_inverse().expect("positive focal lengths");
    let m = k_inv * h;
    let (c0, c1, c2) = (m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned());
    let norm = 0.5 * (c0.norm() + c1.norm());
    if !(norm > 0.0) {
        return Err(Error::DegenerateHomography("vanishing rotation columns".into()));
    }
    let mut lambda = 1.0 / norm;
    if c2.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = c0 * lambda;
    let r2 = c1 * lambda;
    let t: Vec3 = c2 * lambda;
    let r = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let initial = RigidTransform::from_matrix(&r, t);
    let camera_from_marker = refine_pose(&initial, intr, &pts3, corners, 50)?;
    let err = mean_reprojection_error(&camera_from_marker, intr, &pts3, corners);
    Ok(BoardPose {
        camera_pose_in_marker: camera_from_marker.invert(),
        mean_reprojection_px: err,
        high_residual: err > HIGH_RESIDUAL_PX,
    })
}
