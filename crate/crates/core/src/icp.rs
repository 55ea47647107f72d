//! Point-to-point ICP refinement on top of closed-form Kabsch alignment.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Rotation};
use crate::model::ObjectModel;
use crate::spatial::NearestNeighbors;

/// Second singular value of the centered source points, relative to the
/// first, below which the points count as collinear.
const COLLINEARITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IcpError {
    #[error("point sets differ in size ({src} vs {dst})")]
    SizeMismatch { src: usize, dst: usize },
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("source points are collinear")]
    Collinear,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite point")]
    NonFinite,
    #[error("iteration {iteration}: no model point within {gate_mm} mm of the observed cloud")]
    GatingFailure { iteration: usize, gate_mm: f64 },
    #[error("invalid ICP config: {0}")]
    InvalidConfig(String),
}

/// Observed 3D points (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, IcpError> {
        if points.is_empty() {
            return Err(IcpError::EmptyCloud);
        }
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(IcpError::NonFinite);
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Relative RMSE change that ends the loop.
    pub convergence_tol: f64,
    /// Model points farther than this from every observed point are ignored.
    pub max_corr_dist_mm: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig { max_iterations: 50, convergence_tol: 1e-6, max_corr_dist_mm: 50.0 }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        if self.max_iterations == 0 {
            return Err(IcpError::InvalidConfig("max_iterations must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(IcpError::InvalidConfig("convergence_tol must be positive".into()));
        }
        if !(self.max_corr_dist_mm > 0.0) {
            return Err(IcpError::InvalidConfig("max_corr_dist_mm must be positive".into()));
        }
        Ok(())
    }
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn kabsch_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose, IcpError> {
    if src.len() != dst.len() {
        return Err(IcpError::SizeMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(IcpError::TooFewPoints(src.len()));
    }
    let n = src.len() as f64;
    let src_c = src.iter().sum::<Vector3<f64>>() / n;
    let dst_c = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let ds = s - src_c;
        cov += (d - dst_c) * ds.transpose();
        scatter += ds * ds.transpose();
    }
    if cov.iter().chain(scatter.iter()).any(|v| !v.is_finite()) {
        return Err(IcpError::NonFinite);
    }
    let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().map(|e| e.max(0.0).sqrt()).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig[0] == 0.0 || eig[1] <= COLLINEARITY_TOLERANCE * eig[0] {
        return Err(IcpError::Collinear);
    }
    // cov = Σ d sᵀ; the optimal R maximizes tr(Rᵀ cov).
    let rotation = Rotation::nearest(&cov);
    let translation = dst_c - rotation.matrix() * src_c;
    Ok(Pose::new(rotation, translation))
}

/// Refined pose plus the RMSE trace, one entry per correspondence step.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    pub rmse_mm: f64,
    /// `rmse_trace[0]` is measured at the initial pose.
    pub rmse_trace: Vec<f64>,
    pub iterations: usize,
}

/// Model point, matched observed point, squared distance.
type Match = (Vector3<f64>, Vector3<f64>, f64);

/// Gated nearest-neighbour matches of the transformed model.
/// Returns (model points, matched observed points, rmse).
fn match_points(
    model: &ObjectModel,
    index: &NearestNeighbors,
    observed: &PointCloud,
    pose: &Pose,
    gate_sq: f64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, f64) {
    let matches: Vec<Option<Match>> = model
        .points()
        .par_iter()
        .map(|x| {
            let nb = index.nearest(&pose.apply(x))?;
            (nb.dist_sq <= gate_sq).then(|| (*x, observed.points()[nb.index], nb.dist_sq))
        })
        .collect();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut sum = 0.0;
    for (x, y, d) in matches.into_iter().flatten() {
        src.push(x);
        dst.push(y);
        sum += d;
    }
    let rmse = if src.is_empty() { f64::INFINITY } else { (sum / src.len() as f64).sqrt() };
    (src, dst, rmse)
}

/// Point-to-point ICP from `init`.
///
/// Each iteration matches every transformed model point to its nearest
/// observed point within the gate and re-solves the pose by Kabsch on those
/// pairs. An iteration whose RMSE would exceed the previous one is rejected
/// and ends the loop, so the returned trace is non-increasing.
pub fn icp_refine(model: &ObjectModel, observed: &PointCloud, init: &Pose, cfg: &IcpConfig) -> Result<IcpResult, IcpError> {
    cfg.validate()?;
    let index = NearestNeighbors::new(observed.points());
    let gate_sq = cfg.max_corr_dist_mm * cfg.max_corr_dist_mm;

    let mut pose = *init;
    let (mut src, mut dst, mut rmse) = match_points(model, &index, observed, &pose, gate_sq);
    if src.is_empty() {
        return Err(IcpError::GatingFailure { iteration: 0, gate_mm: cfg.max_corr_dist_mm });
    }
    let mut trace = vec![rmse];
    let mut iterations = 0;
    while iterations < cfg.max_iterations && rmse > 0.0 {
        iterations += 1;
        // The pose solved on (model, observed) pairs equals the incremental
        // update composed with the current pose.
        let candidate = match kabsch_align(&src, &dst) {
            Ok(p) => p,
            Err(IcpError::Collinear | IcpError::TooFewPoints(_)) => break,
            Err(e) => return Err(e),
        };
        let (c_src, c_dst, c_rmse) = match_points(model, &index, observed, &candidate, gate_sq);
        if c_src.is_empty() {
            return Err(IcpError::GatingFailure { iteration: iterations, gate_mm: cfg.max_corr_dist_mm });
        }
        if c_rmse > rmse {
            break;
        }
        let rel = (rmse - c_rmse) / rmse;
        pose = candidate;
        (src, dst, rmse) = (c_src, c_dst, c_rmse);
        trace.push(rmse);
        if rel < cfg.convergence_tol {
            break;
        }
    }
    debug_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    Ok(IcpResult { pose, rmse_mm: rmse, rmse_trace: trace, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_to_rotmat, rotation_geodesic_deg, Quaternion};
    use crate::metrics::add_metric;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_points(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut r = rng::stream(seed, "icp-points", 0);
        (0..n).map(|_| Vector3::new(r.random_range(-60.0..60.0), r.random_range(-40.0..40.0), r.random_range(-20.0..20.0))).collect()
    }

    fn random_pose(seed: u64) -> Pose {
        let mut r = rng::stream(seed, "icp-pose", 0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let q = Quaternion::new(n.sample(&mut r), n.sample(&mut r), n.sample(&mut r), n.sample(&mut r)).unwrap();
        Pose::new(
            quat_to_rotmat(&q).unwrap(),
            Vector3::new(r.random_range(-100.0..100.0), r.random_range(-100.0..100.0), r.random_range(500.0..900.0)),
        )
    }

    fn sq_cost(p: &Pose, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        src.iter().zip(dst).map(|(s, d)| (p.apply(s) - d).norm_squared()).sum()
    }

    #[test]
    fn identical_sets_give_identity() {
        let pts = random_points(1, 20);
        let p = kabsch_align(&pts, &pts).unwrap();
        assert!((p.rotation.matrix() - Matrix3::identity()).amax() < 1e-12);
        assert!(p.translation.amax() < 1e-12);
    }

    #[test]
    fn recovers_known_transform() {
        for seed in 0..10 {
            let src = random_points(seed, 50);
            let gt = random_pose(seed);
            let dst: Vec<_> = src.iter().map(|x| gt.apply(x)).collect();
            let p = kabsch_align(&src, &dst).unwrap();
            assert!((p.rotation.matrix() - gt.rotation.matrix()).amax() < 1e-9);
            assert!((p.translation - gt.translation).amax() < 1e-9);
        }
    }

    #[test]
    fn kabsch_errors() {
        let pts = random_points(2, 5);
        assert_eq!(kabsch_align(&pts[..2], &pts[..2]), Err(IcpError::TooFewPoints(2)));
        assert_eq!(kabsch_align(&pts[..3], &pts[..4]), Err(IcpError::SizeMismatch { src: 3, dst: 4 }));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert_eq!(kabsch_align(&line, &line), Err(IcpError::Collinear));
    }

    #[test]
    fn kabsch_is_optimal_against_perturbations() {
        let src = random_points(3, 30);
        let gt = random_pose(3);
        let mut r = rng::stream(3, "noise", 0);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let dst: Vec<_> =
            src.iter().map(|x| gt.apply(x) + Vector3::new(noise.sample(&mut r), noise.sample(&mut r), noise.sample(&mut r))).collect();
        let best = kabsch_align(&src, &dst).unwrap();
        let c0 = sq_cost(&best, &src, &dst);
        for i in 0..100 {
            let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            let delta = Pose::new(
                Rotation::from_axis_angle(&axis, r.random_range(-0.05..0.05)),
                Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
            );
            let perturbed = delta.compose(&best);
            assert!(sq_cost(&perturbed, &src, &dst) >= c0 - 1e-9 * c0, "perturbation {i}");
        }
    }

    #[test]
    fn kabsch_conjugates_under_rigid_change() {
        let src = random_points(4, 40);
        let gt = random_pose(4);
        let dst: Vec<_> = src.iter().map(|x| gt.apply(x)).collect();
        let a = random_pose(40);
        let b = random_pose(41);
        let src2: Vec<_> = src.iter().map(|x| a.apply(x)).collect();
        let dst2: Vec<_> = dst.iter().map(|x| b.apply(x)).collect();
        let p = kabsch_align(&src2, &dst2).unwrap();
        let expected = b.compose(&gt).compose(&a.inverse());
        assert!((p.rotation.matrix() - expected.rotation.matrix()).amax() < 1e-9);
        assert!((p.translation - expected.translation).amax() < 1e-9);
    }

    fn model_and_cloud(seed: u64) -> (ObjectModel, Pose, PointCloud) {
        let model = ObjectModel::new("m", random_points(seed, 300), false).unwrap();
        let gt = random_pose(seed);
        let cloud = PointCloud::new(model.points().iter().map(|x| gt.apply(x)).collect()).unwrap();
        (model, gt, cloud)
    }

    #[test]
    fn icp_fixed_point() {
        let (model, gt, cloud) = model_and_cloud(5);
        let res = icp_refine(&model, &cloud, &gt, &IcpConfig::default()).unwrap();
        assert!(res.rmse_mm < 1e-9);
        assert!(rotation_geodesic_deg(&res.pose.rotation, &gt.rotation) < 1e-6);
        assert!((res.pose.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn icp_recovers_perturbed_pose() {
        for seed in 0..5 {
            let (model, gt, cloud) = model_and_cloud(seed);
            let axis = Vector3::new(0.2, 1.0, -0.4);
            let init = Pose::new(
                gt.rotation * Rotation::from_axis_angle(&axis, 10f64.to_radians()),
                gt.translation + Vector3::new(20.0, 0.0, 0.0) / 1.0,
            );
            let res = icp_refine(&model, &cloud, &init, &IcpConfig::default()).unwrap();
            let rot = rotation_geodesic_deg(&res.pose.rotation, &gt.rotation);
            let trans = (res.pose.translation - gt.translation).norm();
            assert!(rot < 0.1 && trans < 0.5, "seed {seed}: {rot}° {trans} mm");
            assert!(add_metric(&model, &res.pose, &gt) <= 0.1 * add_metric(&model, &init, &gt));
            assert!(res.rmse_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn icp_gating_failure() {
        let (model, gt, cloud) = model_and_cloud(6);
        let far = Pose::new(gt.rotation, gt.translation + Vector3::new(0.0, 0.0, 5000.0));
        assert!(matches!(icp_refine(&model, &cloud, &far, &IcpConfig::default()), Err(IcpError::GatingFailure { iteration: 0, .. })));
    }

    #[test]
    fn empty_cloud_rejected() {
        assert_eq!(PointCloud::new(vec![]), Err(IcpError::EmptyCloud));
    }
}
