//! End-to-end pose pipelines over a [`Scene`].
//!
//! - dino: match templates in the dense map, PnP-RANSAC, then ICP;
//! - clip: one regressor forward pass on the scene's feature vectors;
//! - hybrid: the clip pose as ICP initialization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{build_correspondences, match_keypoints, FeatureError, DEFAULT_MIN_SCORE};
use crate::geometry::Pose;
use crate::icp::{icp_refine, IcpConfig, IcpError};
use crate::model::ObjectModel;
use crate::pnp::{pnp_ransac, PnpError, RansacConfig};
use crate::regressor::{forward, MlpParams, RegressorError};
use crate::synth::Scene;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("matching: {0}")]
    Feature(#[from] FeatureError),
    #[error("pnp: {0}")]
    Pnp(#[from] PnpError),
    #[error("icp: {0}")]
    Icp(#[from] IcpError),
    #[error("regressor: {0}")]
    Regressor(#[from] RegressorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoConfig {
    pub min_score: f64,
    pub ransac: RansacConfig,
    pub icp: IcpConfig,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig { min_score: DEFAULT_MIN_SCORE, ransac: RansacConfig::default(), icp: IcpConfig::default() }
    }
}

/// Final pose plus the stage before refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOutput {
    pub pose: Pose,
    pub coarse: Pose,
}

pub fn run_dino(scene: &Scene, model: &ObjectModel, cfg: &DinoConfig) -> Result<PipelineOutput, PipelineError> {
    let detections = match_keypoints(&scene.feature_map, &scene.templates, cfg.min_score)?;
    let corrs = build_correspondences(&detections, &scene.keypoints)?;
    let pnp = pnp_ransac(&corrs, &scene.camera, &cfg.ransac)?;
    let refined = icp_refine(model, &scene.observed_cloud, &pnp.pose, &cfg.icp)?;
    Ok(PipelineOutput { pose: refined.pose, coarse: pnp.pose })
}

pub fn run_clip(scene: &Scene, params: &MlpParams) -> Result<Pose, PipelineError> {
    Ok(forward(params, &scene.clip_visual, &scene.clip_semantic)?.pose())
}

pub fn run_hybrid(scene: &Scene, model: &ObjectModel, params: &MlpParams, icp: &IcpConfig) -> Result<PipelineOutput, PipelineError> {
    let coarse = run_clip(scene, params)?;
    let refined = icp_refine(model, &scene.observed_cloud, &coarse, icp)?;
    Ok(PipelineOutput { pose: refined.pose, coarse })
}
