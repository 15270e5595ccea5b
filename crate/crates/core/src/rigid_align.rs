//! Closed-form absolute orientation (Horn's quaternion method).
//!
//! Given corresponded point sets `s_i → d_i`, the rotation maximizing
//! `Σ w_i d'_iᵀ R s'_i` over centred points is the eigenvector of a 4×4
//! symmetric matrix built from the cross-covariance, associated with its
//! largest eigenvalue. The quaternion parameterization only spans proper
//! rotations, so reflections can never be returned.

use nalgebra::{Matrix3, Matrix4, Quaternion, Vector4};

use crate::error::{Error, Result};
use crate::geom::{RigidTransform, UnitQuat, Vec3};

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;
const COLLINEAR_RATIO: f64 = 1e-9;

/// Corresponded point pairs with optional non-negative weights.
#[derive(Debug, Clone, Default)]
pub struct Correspondences3D {
    pub pairs: Vec<(Vec3, Vec3)>,
    pub weights: Option<Vec<f64>>,
}

impl Correspondences3D {
    pub fn new(pairs: Vec<(Vec3, Vec3)>) -> Self {
        Self { pairs, weights: None }
    }

    pub fn weighted(pairs: Vec<(Vec3, Vec3)>, weights: Vec<f64>) -> Self {
        Self { pairs, weights: Some(weights) }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn validate(&self) -> Result<()> {
        if self.pairs.len() < 3 {
            return Err(Error::DegenerateConfiguration(format!(
                "{} pairs given, at least 3 required",
                self.pairs.len()
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.pairs.len() {
                return Err(Error::invalid("weights", "one weight per pair required"));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::invalid("weights", "weights must be finite and non-negative"));
            }
        }
        if self.pairs.iter().any(|(s, d)| !s.iter().chain(d.iter()).all(|c| c.is_finite())) {
            return Err(Error::invalid("pairs", "points must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Maps source points onto target points.
    pub transform: RigidTransform,
    /// Weighted RMS residual, meters.
    pub rmsd: f64,
}

/// Weighted RMS of `‖T(s_i) − d_i‖` for an arbitrary transform.
pub fn alignment_rmsd(c: &Correspondences3D, t: &RigidTransform) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (s, d)) in c.pairs.iter().enumerate() {
        let w = c.weight(i);
        num += w * (t.transform_point(s) - d).norm_squared();
        den += w;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Rigid transform minimizing `Σ w_i ‖T(s_i) − d_i‖²` (no scale).
pub fn horn_align(c: &Correspondences3D) -> Result<Alignment> {
    c.validate()?;
    let total: f64 = (0..c.pairs.len()).map(|i| c.weight(i)).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateConfiguration("all weights are zero".into()));
    }
    let mut src_c = Vec3::zeros();
    let mut dst_c = Vec3::zeros();
    for (i, (s, d)) in c.pairs.iter().enumerate() {
        let w = c.weight(i);
        src_c += s * w;
        dst_c += d * w;
    }
    src_c /= total;
    dst_c /= total;

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (i, (s, d)) in c.pairs.iter().enumerate() {
        let w = c.weight(i);
        let s = s - src_c;
        let d = d - dst_c;
        scatter += s * s.transpose() * w;
        cross += s * d.transpose() * w;
    }
    check_not_collinear(&scatter)?;

    let n = horn_matrix(&cross);
    let top = max_eigvec_sym4(&n)?;
    let v = top.vector;
    let rotation = UnitQuat::new_normalize(Quaternion::new(v[0], v[1], v[2], v[3]));
    let translation = dst_c - rotation * src_c;
    let transform = RigidTransform::new(rotation, translation);
    Ok(Alignment { transform, rmsd: alignment_rmsd(c, &transform) })
}

fn check_not_collinear(scatter: &Matrix3<f64>) -> Result<()> {
    // Singular values of the centred data matrix are sqrt of scatter eigenvalues.
    let mut sv: Vec<f64> = scatter.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] < COLLINEAR_RATIO * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "source points are collinear; rotation about the line is unobservable".into(),
        ));
    }
    Ok(())
}

/// Horn's 4×4 matrix; `cross[(a, b)] = Σ w s'_a d'_b`.
fn horn_matrix(m: &Matrix3<f64>) -> Matrix4<f64> {
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenpair4 {
    pub value: f64,
    pub vector: Vector4<f64>,
    /// The largest eigenvalue is (numerically) repeated, so the vector is one
    /// arbitrary member of its eigenspace.
    pub degenerate_multiplicity: bool,
}

/// Largest eigenpair of a symmetric 4×4 matrix by cyclic Jacobi rotations.
pub fn max_eigvec_sym4(m: &Matrix4<f64>) -> Result<Eigenpair4> {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).norm() > 1e-12 * scale.max(1.0) {
        return Err(Error::invalid("matrix", "must be symmetric"));
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("matrix", "must be finite"));
    }

    let mut a = *m;
    let mut v = Matrix4::<f64>::identity();
    let off = |a: &Matrix4<f64>| {
        let mut s = 0.0;
        for p in 0..4 {
            for q in (p + 1)..4 {
                s += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        s.sqrt()
    };

    let mut converged = off(&a) <= JACOBI_TOL * scale;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        for p in 0..3 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
        converged = off(&a) <= JACOBI_TOL * scale;
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: sweep });
    }

    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let best = order[0];
    let value = a[(best, best)];
    let vector = v.column(best).normalize();
    let degenerate_multiplicity = (value - a[(order[1], order[1])]).abs() <= 1e-9 * scale.max(1.0);
    Ok(Eigenpair4 { value, vector, degenerate_multiplicity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn tetra() -> Vec<Vec3> {
        vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()]
    }

    #[test]
    fn recovers_constructed_pose() {
        let truth =
            RigidTransform::new(UnitQuat::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2), Vec3::new(1.0, 2.0, 3.0));
        let pairs = tetra().into_iter().map(|s| (s, truth.transform_point(&s))).collect();
        let a = horn_align(&Correspondences3D::new(pairs)).unwrap();
        let q = a.transform.rotation();
        let h = 0.5f64.sqrt();
        assert_relative_eq!(q.w, h, epsilon = 1e-12);
        assert_relative_eq!(q.k, h, epsilon = 1e-12);
        assert!(q.i.abs() < 1e-12 && q.j.abs() < 1e-12);
        assert_relative_eq!(a.transform.translation, Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
        assert!(a.rmsd < 1e-12);
    }

    #[test]
    fn identical_sets_give_identity() {
        let pairs = tetra().into_iter().map(|s| (s, s)).collect();
        let a = horn_align(&Correspondences3D::new(pairs)).unwrap();
        assert!(a.transform.translation.norm() < 1e-12);
        assert!(a.transform.rotation().angle() < 1e-12);
        assert!(a.rmsd < 1e-12);
    }

    #[test]
    fn collinear_sources_are_rejected() {
        let pairs: Vec<_> = (0..3).map(|i| (Vec3::x() * i as f64, Vec3::y() * i as f64)).collect();
        assert!(matches!(horn_align(&Correspondences3D::new(pairs)), Err(Error::DegenerateConfiguration(_))));
        let two = vec![(Vec3::x(), Vec3::x()), (Vec3::y(), Vec3::y())];
        assert!(horn_align(&Correspondences3D::new(two)).is_err());
    }

    #[test]
    fn eigen_diagonal_and_identity() {
        let d = Matrix4::from_diagonal(&Vector4::new(4.0, 3.0, 2.0, 1.0));
        let e = max_eigvec_sym4(&d).unwrap();
        assert_eq!(e.value, 4.0);
        assert_relative_eq!(e.vector[0].abs(), 1.0);
        assert!(!e.degenerate_multiplicity);

        let e = max_eigvec_sym4(&Matrix4::identity()).unwrap();
        assert_eq!(e.value, 1.0);
        assert_relative_eq!(e.vector.norm(), 1.0, epsilon = 1e-15);
        assert!(e.degenerate_multiplicity);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let mut m = Matrix4::identity();
        m[(0, 1)] = 1.0;
        assert!(max_eigvec_sym4(&m).is_err());
    }

    fn random_unit4(rng: &mut ChaCha8Rng) -> Vector4<f64> {
        loop {
            let v = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if v.norm() > 1e-3 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn eigen_beats_rayleigh_quotients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let b = Matrix4::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let m = (b + b.transpose()) * 0.5;
            let e = max_eigvec_sym4(&m).unwrap();
            assert!((m * e.vector - e.vector * e.value).norm() < 1e-10);
            for _ in 0..100 {
                let x = random_unit4(&mut rng);
                assert!(e.value >= (x.transpose() * m * x)[0] - 1e-12);
            }
        }
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = RigidTransform::new(UnitQuat::from_euler_angles(0.2, 0.4, -1.0), Vec3::new(0.1, 0.2, 0.3));
        let pairs: Vec<_> = (0..12)
            .map(|_| {
                let s = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let n = Vec3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
                (s, truth.transform_point(&s) + n)
            })
            .collect();
        let a = horn_align(&Correspondences3D::new(pairs.clone())).unwrap();
        let b = horn_align(&Correspondences3D::weighted(pairs, vec![2.5; 12])).unwrap();
        assert!((a.transform.translation - b.transform.translation).norm() < 1e-12);
        assert!(a.transform.angle_to(&b.transform) < 1e-12);
        assert_relative_eq!(a.rmsd, b.rmsd, epsilon = 1e-12);
    }

    fn arb_cloud() -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 4..15)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
    }

    fn arb_rot() -> impl Strategy<Value = UnitQuat> {
        (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64).prop_map(|(r, p, y)| UnitQuat::from_euler_angles(r, p, y))
    }

    proptest! {
        #[test]
        fn not_worse_than_identity_and_permutation_invariant(
            src in arb_cloud(), rot in arb_rot(), noise in arb_cloud(), shift in 0usize..15
        ) {
            let truth = RigidTransform::new(rot, Vec3::new(0.3, -0.2, 1.0));
            let pairs: Vec<_> = src.iter().enumerate()
                .map(|(i, s)| (*s, truth.transform_point(s) + noise[i % noise.len()] * 0.01))
                .collect();
            let c = Correspondences3D::new(pairs.clone());
            let Ok(a) = horn_align(&c) else { return Ok(()); };
            prop_assert!(a.rmsd <= alignment_rmsd(&c, &RigidTransform::identity()) + 1e-12);

            let mut shuffled = pairs;
            shuffled.rotate_left(shift % src.len());
            shuffled.reverse();
            let b = horn_align(&Correspondences3D::new(shuffled)).unwrap();
            prop_assert!((a.transform.translation - b.transform.translation).norm() < 1e-9);
            prop_assert!(a.transform.angle_to(&b.transform) < 1e-9);
        }

        #[test]
        fn source_rotation_equivariance(src in arb_cloud(), rot in arb_rot(), pre in arb_rot()) {
            let truth = RigidTransform::new(rot, Vec3::new(0.5, 0.1, -0.2));
            let pairs: Vec<_> = src.iter().map(|s| (*s, truth.transform_point(s) + Vec3::new(s.y, s.z, s.x) * 0.003)).collect();
            let Ok(a) = horn_align(&Correspondences3D::new(pairs.clone())) else { return Ok(()); };
            let rotated: Vec<_> = pairs.iter().map(|(s, d)| (pre * s, *d)).collect();
            let b = horn_align(&Correspondences3D::new(rotated)).unwrap();
            let expected = a.transform.rotation() * pre.inverse();
            prop_assert!(crate::geom::geodesic_angle(b.transform.rotation(), &expected) < 1e-9);
        }
    }
}
