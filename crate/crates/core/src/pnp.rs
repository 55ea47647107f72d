//! Pose from 2D-3D correspondences.
//!
//! - [`pnp_dlt`]: linear 6+-point solve of the 3×4 projection in normalized
//!   camera coordinates, then projection of the left 3×3 block onto SO(3).
//! - [`pnp_refine`]: Gauss-Newton on the squared reprojection error with a
//!   rotation-vector update `R ← exp(ω) R`, `t ← t + δt`.
//! - [`pnp_ransac`]: 6-point DLT hypotheses scored by inlier count, with
//!   per-iteration random streams so that parallel and serial runs agree.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, CameraIntrinsics, Pose, Rotation};
use crate::rng;

/// Minimal sample size of the DLT hypothesis generator.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Relative smallest singular value of the centered model points below which
/// the configuration counts as planar.
pub const COPLANARITY_TOLERANCE: f64 = 1e-6;

/// Hypotheses evaluated per RANSAC batch. Stopping is checked between
/// batches, so the batch size is part of the determinism contract.
const RANSAC_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnpError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("model points are coplanar (relative singular value {ratio:.3e})")]
    Coplanar { ratio: f64 },
    #[error("linear system is rank deficient")]
    RankDeficient,
    #[error("non-finite value in correspondences or solution")]
    NonFinite,
    #[error("initial pose puts correspondences behind the camera")]
    BehindCamera,
    #[error("normal equations are singular even after damping")]
    SingularNormalEquations,
    #[error("no hypothesis reached {needed} inliers (best {best})")]
    ConsensusFailure { needed: usize, best: usize },
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
}

/// A 3D model point (mm) and its observed image location (px).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub model_point: Vector3<f64>,
    pub image_point: Vector2<f64>,
}

impl Correspondence {
    pub fn new(model_point: Vector3<f64>, image_point: Vector2<f64>) -> Self {
        Correspondence { model_point, image_point }
    }

    fn is_finite(&self) -> bool {
        self.model_point.iter().chain(self.image_point.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { inlier_threshold_px: 2.0, max_iterations: 1000, confidence: 0.999, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if !(self.inlier_threshold_px > 0.0) {
            return Err(PnpError::InvalidConfig("inlier_threshold_px must be > 0".into()));
        }
        if self.max_iterations < 1 {
            return Err(PnpError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PnpError::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inlier_mask: Vec<bool>,
    /// Mean reprojection error over the inliers.
    pub mean_reproj_err_px: f64,
    /// Hypotheses evaluated before stopping.
    pub iterations: usize,
}

impl PnpResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|m| **m).count()
    }
}

/// Reprojection error per correspondence; `+∞` for points behind the camera.
pub fn reprojection_errors(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Vec<f64> {
    corrs
        .iter()
        .map(|c| match k.project_camera_point(&pose.apply(&c.model_point)) {
            Ok(uv) => (uv - c.image_point).norm(),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

fn check_non_coplanar(corrs: &[Correspondence]) -> Result<(), PnpError> {
    let n = corrs.len() as f64;
    let centroid = corrs.iter().map(|c| c.model_point).sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for c in corrs {
        let d = c.model_point - centroid;
        scatter += d * d.transpose();
    }
    // Singular values of the centered 3×n matrix are the square roots of the
    // scatter eigenvalues.
    let eig = scatter.symmetric_eigenvalues();
    let max = eig.max().max(0.0).sqrt();
    let min = eig.min().max(0.0).sqrt();
    if max == 0.0 || min <= COPLANARITY_TOLERANCE * max {
        return Err(PnpError::Coplanar { ratio: if max == 0.0 { 0.0 } else { min / max } });
    }
    Ok(())
}

/// Linear pose from at least six non-coplanar correspondences.
pub fn pnp_dlt(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose, PnpError> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(PnpError::TooFewPoints { needed: MIN_CORRESPONDENCES, got: n });
    }
    if corrs.iter().any(|c| !c.is_finite()) {
        return Err(PnpError::NonFinite);
    }
    check_non_coplanar(corrs)?;

    // Condition the 3D points: zero mean, unit RMS distance per axis.
    let centroid = corrs.iter().map(|c| c.model_point).sum::<Vector3<f64>>() / n as f64;
    let rms = (corrs.iter().map(|c| (c.model_point - centroid).norm_squared()).sum::<f64>() / (3.0 * n as f64)).sqrt();
    let scale = if rms > 0.0 { rms } else { 1.0 };

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, c) in corrs.iter().enumerate() {
        let x = (c.model_point - centroid) / scale;
        let xh = [x.x, x.y, x.z, 1.0];
        let u = (c.image_point.x - k.cx) / k.fx;
        let v = (c.image_point.y - k.cy) / k.fy;
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(PnpError::RankDeficient)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = sv[order[sv.len() - 1]];
    if !(largest > 0.0) || sv[second] <= 1e-12 * largest {
        return Err(PnpError::RankDeficient);
    }
    let p = v_t.row(smallest);
    // P' acts on conditioned points; undo the conditioning.
    let m_cond = Matrix3::from_fn(|r, c| p[4 * r + c]);
    let col4 = Vector3::new(p[3], p[7], p[11]);
    let mut m = m_cond / scale;
    let mut p4 = col4 - m_cond * centroid / scale;

    let in_front = corrs.iter().filter(|c| (m.row(2) * c.model_point)[0] + p4.z > 0.0).count();
    if 2 * in_front < n {
        m = -m;
        p4 = -p4;
    }
    let svd_m = m.svd(false, false);
    let s_mean = svd_m.singular_values.sum() / 3.0;
    if !(s_mean > 0.0) {
        return Err(PnpError::RankDeficient);
    }
    let rotation = Rotation::nearest(&m);
    let translation = p4 / s_mean;
    if rotation.matrix().iter().chain(translation.iter()).any(|v| !v.is_finite()) {
        return Err(PnpError::NonFinite);
    }
    Ok(Pose::new(rotation, translation))
}

fn reprojection_cost(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    let mut cost = 0.0;
    for c in corrs {
        match k.project_camera_point(&pose.apply(&c.model_point)) {
            Ok(uv) => cost += (uv - c.image_point).norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

fn apply_update(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::new(Rotation::from_rotation_vector(&omega) * pose.rotation, pose.translation + dt)
}

fn solve_normal_equations(h: &Matrix6<f64>, g: &Vector6<f64>) -> Result<Vector6<f64>, PnpError> {
    if let Some(ch) = h.cholesky() {
        return Ok(-ch.solve(g));
    }
    let lambda = 1e-6 * h.trace();
    let damped = h + Matrix6::identity() * lambda;
    damped.cholesky().map(|ch| -ch.solve(g)).ok_or(PnpError::SingularNormalEquations)
}

/// Gauss-Newton refinement of the summed squared reprojection error.
///
/// Stops when the relative cost decrease drops below `tol`, when no step
/// (after halving) lowers the cost, or after `max_iters` iterations. The
/// returned pose never has higher cost than `init`.
pub fn pnp_refine(init: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics, max_iters: usize, tol: f64) -> Result<Pose, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::TooFewPoints { needed: 4, got: corrs.len() });
    }
    let mut pose = *init;
    let mut cost = reprojection_cost(&pose, corrs, k);
    if !cost.is_finite() {
        return Err(PnpError::BehindCamera);
    }
    let initial_cost = cost;
    for _ in 0..max_iters {
        if cost == 0.0 {
            break;
        }
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corrs {
            let rx = pose.rotation.matrix() * c.model_point;
            let p = rx + pose.translation;
            let (x, y, z) = (p.x, p.y, p.z);
            let r = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy) - c.image_point;
            let d_proj = nalgebra::Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
            let d_rot = d_proj * (-skew(&rx));
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let delta = solve_normal_equations(&h, &g)?;
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..8 {
            let candidate = apply_update(&pose, &step);
            let c = reprojection_cost(&candidate, corrs, k);
            if c < cost {
                accepted = Some((candidate, c));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, new_cost)) = accepted else { break };
        let rel = (cost - new_cost) / cost;
        pose = candidate;
        cost = new_cost;
        if rel < tol {
            break;
        }
    }
    debug_assert!(cost <= initial_cost);
    Ok(pose)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    iteration: usize,
    pose: Pose,
    inliers: usize,
    mean_err: f64,
}

impl Hypothesis {
    fn beats(&self, other: &Hypothesis) -> bool {
        if self.inliers != other.inliers {
            return self.inliers > other.inliers;
        }
        if self.mean_err != other.mean_err {
            return self.mean_err < other.mean_err;
        }
        self.iteration < other.iteration
    }
}

fn score(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics, threshold: f64) -> (Vec<bool>, usize, f64) {
    let errs = reprojection_errors(pose, corrs, k);
    let mask: Vec<bool> = errs.iter().map(|e| *e < threshold).collect();
    let count = mask.iter().filter(|m| **m).count();
    let sum: f64 = errs.iter().zip(&mask).filter(|(_, m)| **m).map(|(e, _)| *e).sum();
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (mask, count, mean)
}

fn hypothesis(iteration: usize, corrs: &[Correspondence], k: &CameraIntrinsics, cfg: &RansacConfig) -> Option<Hypothesis> {
    let mut stream = rng::stream(cfg.seed, "pnp-ransac", iteration as u64);
    let picked = sample(&mut stream, corrs.len(), MIN_CORRESPONDENCES);
    let subset: Vec<Correspondence> = picked.iter().map(|i| corrs[i]).collect();
    let dlt = pnp_dlt(&subset, k).ok()?;
    // The 6-point DLT fits 11 projective parameters to 12 equations and
    // amplifies pixel noise; a short 6-dof polish on the same points fixes it.
    let pose = pnp_refine(&dlt, &subset, k, 5, 1e-10).unwrap_or(dlt);
    let (_, inliers, mean_err) = score(&pose, corrs, k, cfg.inlier_threshold_px);
    Some(Hypothesis { iteration, pose, inliers, mean_err })
}

/// Hypotheses needed so that an all-inlier sample was drawn with probability
/// `confidence`, given inlier ratio `w`.
fn required_iterations(w: f64, confidence: f64) -> f64 {
    let all_inlier = w.powi(MIN_CORRESPONDENCES as i32);
    if all_inlier >= 1.0 {
        return 1.0;
    }
    if all_inlier <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - all_inlier).ln()).ceil()
}

/// Robust pose: DLT hypotheses on random 6-subsets, best consensus refined
/// over its inliers.
pub fn pnp_ransac(corrs: &[Correspondence], k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PnpResult, PnpError> {
    cfg.validate()?;
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(PnpError::TooFewPoints { needed: MIN_CORRESPONDENCES, got: n });
    }
    if corrs.iter().any(|c| !c.is_finite()) {
        return Err(PnpError::NonFinite);
    }

    let mut best: Option<Hypothesis> = None;
    let mut done = 0;
    while done < cfg.max_iterations {
        let end = (done + RANSAC_BATCH).min(cfg.max_iterations);
        let batch: Vec<Option<Hypothesis>> = (done..end).into_par_iter().map(|i| hypothesis(i, corrs, k, cfg)).collect();
        for h in batch.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| h.beats(b)) {
                best = Some(h);
            }
        }
        done = end;
        if let Some(b) = &best {
            if (done as f64) >= required_iterations(b.inliers as f64 / n as f64, cfg.confidence) {
                break;
            }
        }
    }

    let best_count = best.as_ref().map_or(0, |b| b.inliers);
    let Some(best) = best.filter(|b| b.inliers >= MIN_CORRESPONDENCES) else {
        return Err(PnpError::ConsensusFailure { needed: MIN_CORRESPONDENCES, best: best_count });
    };

    // Refine over the consensus set, re-deriving the set from the refined pose.
    let threshold = cfg.inlier_threshold_px;
    let (mut mask, mut count, mut mean) = score(&best.pose, corrs, k, threshold);
    let mut pose = best.pose;
    for _ in 0..3 {
        let inliers: Vec<Correspondence> = corrs.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
        let Ok(refined) = pnp_refine(&pose, &inliers, k, 50, 1e-12) else { break };
        let (new_mask, new_count, new_mean) = score(&refined, corrs, k, threshold);
        if new_count < count || (new_count == count && new_mean > mean) {
            break;
        }
        let stable = new_mask == mask;
        pose = refined;
        (mask, count, mean) = (new_mask, new_count, new_mean);
        if stable {
            break;
        }
    }
    Ok(PnpResult { pose, inlier_mask: mask, mean_reproj_err_px: mean, iterations: done })
}
