//! Pairwise-consistency outlier rejection.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObjectModel;

use super::LiftedKeypoint;

const MIN_INLIERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    /// Affinity bandwidth, meters.
    pub sigma: f64,
    /// Keep points whose eigenvector entry is at least `tau` times the largest.
    pub tau: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { sigma: 0.01, tau: 0.5, max_iters: 200, tol: 1e-10 }
    }
}

/// `W_ij = exp(-(d_obs(i,j) - d_mod(i,j))² / 2σ²)`, zero diagonal.
pub fn affinity_matrix(observed: &[LiftedKeypoint], model: &ObjectModel, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", "must be positive"));
    }
    let mut seen = HashSet::new();
    let mut model_pts = Vec::with_capacity(observed.len());
    for (i, o) in observed.iter().enumerate() {
        if !seen.insert(o.keypoint_id.as_str()) {
            return Err(Error::invalid(
                format!("observed[{i}].keypoint_id"),
                format!("duplicate keypoint `{}`", o.keypoint_id),
            ));
        }
        if !o.position.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid(format!("observed[{i}].position"), "must be finite"));
        }
        model_pts.push(
            *model
                .keypoint(&o.keypoint_id)
                .ok_or_else(|| Error::NotFound { kind: "keypoint", id: o.keypoint_id.clone() })?,
        );
    }
    let n = observed.len();
    let denom = 2.0 * sigma * sigma;
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d_obs = (observed[i].position - observed[j].position).norm();
            let d_mod = (model_pts[i] - model_pts[j]).norm();
            let a = (-(d_obs - d_mod).powi(2) / denom).exp();
            w[(i, j)] = a;
            w[(j, i)] = a;
        }
    }
    Ok(w)
}

/// Ids of the mutually consistent keypoints, in input order.
///
/// The principal eigenvector of the affinity matrix is found by power
/// iteration on `W + I`; the shift keeps the iteration from oscillating when
/// `W` has a negative eigenvalue of comparable magnitude.
pub fn spectral_inliers(observed: &[LiftedKeypoint], model: &ObjectModel, cfg: &SpectralConfig) -> Result<Vec<String>> {
    if observed.len() < MIN_INLIERS {
        return Err(Error::TooFewInliers { inliers: observed.len(), required: MIN_INLIERS });
    }
    let w = affinity_matrix(observed, model, cfg.sigma)? + DMatrix::identity(observed.len(), observed.len());
    let n = observed.len();
    let mut u = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..cfg.max_iters {
        let mut next = &w * &u;
        let norm = next.norm();
        if !(norm > 0.0) {
            break;
        }
        next /= norm;
        let delta = (&next - &u).norm();
        u = next;
        if delta < cfg.tol {
            break;
        }
    }
    u.apply(|x| *x = x.abs());
    let max = u.max();
    let keep: Vec<String> = observed
        .iter()
        .zip(u.iter())
        .filter(|(_, &ui)| ui >= cfg.tau * max)
        .map(|(o, _)| o.keypoint_id.clone())
        .collect();
    if keep.len() < MIN_INLIERS {
        return Err(Error::TooFewInliers { inliers: keep.len(), required: MIN_INLIERS });
    }
    Ok(keep)
}
