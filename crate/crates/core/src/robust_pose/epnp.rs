//! EPnP: points as barycentric combinations of control points, whose camera
//! coordinates lie in the null space of a 2n×12 (2n×9 when planar) system.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, RigidTransform, Vec3};
use crate::reprojection::mean_reprojection_error;
use crate::rigid_align::{horn_align, Correspondences3D};

/// Every β candidate worse than this mean reprojection error is a failure.
pub const SOLVER_FAILURE_PX: f64 = 50.0;

const PLANAR_RATIO: f64 = 1e-6;
const GN_ITERS: usize = 50;

struct ControlFrame {
    /// World control points; the first is the centroid.
    world: Vec<Vec3>,
    /// Barycentric coordinates, one row per point.
    alphas: Vec<Vec<f64>>,
}

fn control_frame(points: &[Vec3]) -> Result<ControlFrame> {
    let n = points.len() as f64;
    let c0 = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c0;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sv: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()).collect();
    if !(sv[0] > 0.0) {
        return Err(Error::DegenerateConfiguration("all points coincide".into()));
    }
    if sv[1] < PLANAR_RATIO * sv[0] {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }
    let planar = sv[2] < PLANAR_RATIO * sv[0];
    let axes = if planar { 2 } else { 3 };

    let mut world = vec![c0];
    let mut dirs = Vec::with_capacity(axes);
    for &k in order.iter().take(axes) {
        let v: Vec3 = eig.eigenvectors.column(k).into();
        let scale = (eig.eigenvalues[k] / n).sqrt();
        world.push(c0 + v * scale);
        dirs.push((v, scale));
    }
    let alphas = points
        .iter()
        .map(|p| {
            let d = p - c0;
            let mut a = vec![0.0; axes + 1];
            for (j, (v, s)) in dirs.iter().enumerate() {
                a[j + 1] = v.dot(&d) / s;
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();
    Ok(ControlFrame { world, alphas })
}

/// Kernel vectors of `M`, ordered by increasing singular value.
fn kernel(frame: &ControlFrame, pixels: &[Pixel], intr: &CameraIntrinsics, count: usize) -> Vec<DVector<f64>> {
    let m = frame.world.len();
    let cols = 3 * m;
    let rows = (2 * pixels.len()).max(cols);
    let mut mat = DMatrix::<f64>::zeros(rows, cols);
    for (i, (a, px)) in frame.alphas.iter().zip(pixels).enumerate() {
        for j in 0..m {
            mat[(2 * i, 3 * j)] = a[j] * intr.fx();
            mat[(2 * i, 3 * j + 2)] = a[j] * (intr.px() - px.u);
            mat[(2 * i + 1, 3 * j + 1)] = a[j] * intr.fy();
            mat[(2 * i + 1, 3 * j + 2)] = a[j] * (intr.py() - px.v);
        }
    }
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    order.into_iter().take(count).map(|r| v_t.row(r).transpose()).collect()
}

fn point_of(v: &DVector<f64>, j: usize) -> Vec3 {
    Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
}

/// Control-point pair differences per kernel vector and target squared lengths.
struct DistanceSystem {
    diffs: Vec<Vec<Vec3>>,
    rho: Vec<f64>,
}

impl DistanceSystem {
    fn new(frame: &ControlFrame, kernel: &[DVector<f64>]) -> Self {
        let m = frame.world.len();
        let mut diffs = Vec::new();
        let mut rho = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                diffs.push(kernel.iter().map(|v| point_of(v, a) - point_of(v, b)).collect());
                rho.push((frame.world[a] - frame.world[b]).norm_squared());
            }
        }
        Self { diffs, rho }
    }

    /// Least squares on a subset of the linearized products `β_k β_l`.
    ///
    /// `n` kernel vectors take part; with `first_row_only` just the products
    /// `β_0 β_k` are kept (all four betas from six constraints).
    fn init(&self, n: usize, total: usize, first_row_only: bool) -> Option<Vec<f64>> {
        let pairs: Vec<(usize, usize)> = if first_row_only {
            (0..n).map(|k| (0, k)).collect()
        } else {
            (0..n).flat_map(|k| (k..n).map(move |l| (k, l))).collect()
        };
        if pairs.len() > self.rho.len() {
            return None;
        }
        let mut l = DMatrix::zeros(self.rho.len(), pairs.len());
        for (r, d) in self.diffs.iter().enumerate() {
            for (c, &(k, q)) in pairs.iter().enumerate() {
                let f = if k == q { 1.0 } else { 2.0 };
                l[(r, c)] = f * d[k].dot(&d[q]);
            }
        }
        let rho = DVector::from_vec(self.rho.clone());
        let prod = pinv_solve(&l, &rho)?;
        let at = |k: usize, q: usize| prod[pairs.iter().position(|&p| p == (k, q)).unwrap()];
        let mut beta = vec![0.0; total];
        beta[0] = at(0, 0).abs().sqrt();
        for k in 1..n {
            beta[k] = if first_row_only {
                if beta[0] > 0.0 {
                    at(0, k) / beta[0]
                } else {
                    0.0
                }
            } else {
                at(0, k).signum() * at(k, k).abs().sqrt()
            };
        }
        Some(beta)
    }

    fn residuals(&self, beta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.rho.len(),
            self.diffs.iter().zip(&self.rho).map(|(d, rho)| combine(d, beta).norm_squared() - rho),
        )
    }

    /// Levenberg-Marquardt on the distance residuals.
    fn refine(&self, mut beta: Vec<f64>) -> Vec<f64> {
        let k = beta.len();
        let mut cost = self.residuals(&beta).norm_squared();
        let mut lambda = 1e-8;
        for _ in 0..GN_ITERS {
            let e = self.residuals(&beta);
            let mut j = DMatrix::zeros(self.rho.len(), k);
            for (r, d) in self.diffs.iter().enumerate() {
                let s = combine(d, &beta);
                for c in 0..k {
                    j[(r, c)] = 2.0 * s.dot(&d[c]);
                }
            }
            let jtj = j.transpose() * &j;
            let jte = j.transpose() * e;
            let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
            let mut accepted = false;
            while lambda < 1e6 {
                let mut damped = jtj.clone();
                for i in 0..k {
                    damped[(i, i)] += lambda * scale;
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&(-&jte))) else {
                    lambda *= 10.0;
                    continue;
                };
                let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
                let c = self.residuals(&candidate).norm_squared();
                if c < cost {
                    beta = candidate;
                    cost = c;
                    lambda = (lambda * 0.1).max(1e-15);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        beta
    }
}

fn combine(d: &[Vec3], beta: &[f64]) -> Vec3 {
    d.iter().zip(beta).map(|(v, b)| v * *b).sum()
}

/// Minimum-norm least-squares solution, dropping singular values below
/// `1e-12 × max`.
fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || !smax.is_finite() {
        return None;
    }
    svd.solve(b, 1e-12 * smax).ok()
}

fn pose_from_betas(frame: &ControlFrame, kernel: &[DVector<f64>], beta: &[f64]) -> Option<RigidTransform> {
    let m = frame.world.len();
    let mut cam: Vec<Vec3> = (0..m).map(|j| kernel.iter().zip(beta).map(|(v, b)| point_of(v, j) * *b).sum()).collect();
    let behind = frame.alphas.iter().filter(|a| a.iter().zip(&cam).map(|(w, c)| c.z * w).sum::<f64>() < 0.0).count();
    if 2 * behind > frame.alphas.len() {
        for c in &mut cam {
            *c = -*c;
        }
    }
    let pairs = frame.world.iter().copied().zip(cam).collect();
    horn_align(&Correspondences3D::new(pairs)).ok().map(|a| a.transform)
}

/// Pose `camera_from_object` from ≥ 4 point/pixel correspondences.
pub fn epnp(model_pts: &[Vec3], pixels: &[Pixel], intr: &CameraIntrinsics) -> Result<RigidTransform> {
    epnp_with_error(model_pts, pixels, intr).map(|(t, _)| t)
}

/// As [`epnp`], also returning the mean reprojection error in pixels.
pub(crate) fn epnp_with_error(
    model_pts: &[Vec3],
    pixels: &[Pixel],
    intr: &CameraIntrinsics,
) -> Result<(RigidTransform, f64)> {
    if model_pts.len() != pixels.len() {
        return Err(Error::invalid("pixels", "one pixel per model point required"));
    }
    if model_pts.len() < 4 {
        return Err(Error::InsufficientPoints { got: model_pts.len(), required: 4 });
    }
    if let Some(i) = model_pts.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::invalid(format!("model_pts[{i}]"), "must be finite"));
    }
    if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("pixels[{i}]"), "must be finite"));
    }

    let frame = control_frame(model_pts)?;
    let m = frame.world.len();
    let kernel = kernel(&frame, pixels, intr, m);
    let system = DistanceSystem::new(&frame, &kernel);

    let mut best: Option<(RigidTransform, f64)> = None;
    let mut starts: Vec<(usize, bool)> = (1..m).map(|n| (n, false)).collect();
    starts.push((m, true));
    for (n, first_row_only) in starts {
        let Some(init) = system.init(n, m, first_row_only) else {
            continue;
        };
        let beta = system.refine(init);
        let Some(pose) = pose_from_betas(&frame, &kernel, &beta) else {
            continue;
        };
        let err = mean_reprojection_error(&pose, intr, model_pts, pixels);
        if err.is_finite() && best.as_ref().is_none_or(|(_, e)| err < *e) {
            best = Some((pose, err));
        }
    }
    match best {
        Some((pose, err)) if err <= SOLVER_FAILURE_PX => Ok((pose, err)),
        Some((_, err)) => Err(Error::SolverFailure { best_error_px: err }),
        None => Err(Error::SolverFailure { best_error_px: f64::INFINITY }),
    }
}
