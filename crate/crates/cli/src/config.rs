//! Run configuration.
//!
//! A single JSON document drives every command. All fields are optional and
//! unknown fields are rejected. Relative paths resolve against the directory
//! of the config file. Errors carry the JSON pointer of the offending value.
//!
//! ```json
//! {
//!   "pipeline": "dino",
//!   "method_name": "dino",
//!   "model": { "path": null, "symmetric": false },
//!   "scenes": { "synthetic": { "count": 10, "config": { "seed": 7 } } },
//!   "min_score": 0.3,
//!   "ransac": { "inlier_threshold_px": 4.0 },
//!   "icp": { "max_corr_dist_mm": 50.0 },
//!   "dataset": { "seed": 0, "n_samples": 500, "feature_dim": 32, "noise_sigma": 0.01 },
//!   "train": { "epochs": 100, "learning_rate": 0.0001 },
//!   "checkpoint": "out/train/checkpoint",
//!   "output": "out/pipeline"
//! }
//! ```
//!
//! `scenes` is either `{"synthetic": {...}}` or `{"dir": "<synth output>"}`.
//! A missing `model.path` selects the built-in `driller_like` model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pose_forge::icp::IcpConfig;
use pose_forge::pnp::RansacConfig;
use pose_forge::regressor::TrainConfig;
use pose_forge::synth::{SceneConfig, REGRESSION_NOISE_SIGMA};
use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Clip,
    Dino,
    Hybrid,
}

impl PipelineKind {
    pub fn default_method_name(self) -> &'static str {
        match self {
            PipelineKind::Clip => "clip",
            PipelineKind::Dino => "dino",
            PipelineKind::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// PLY or XYZ file; `None` selects the built-in model.
    pub path: Option<PathBuf>,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScenes {
    pub count: usize,
    /// Scene `i` uses seed `derive_seed(config.seed, "scene", i)`.
    pub config: SceneConfig,
}

impl Default for SyntheticScenes {
    fn default() -> Self {
        SyntheticScenes { count: 10, config: SceneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    Synthetic(SyntheticScenes),
    /// Output directory of `synth`.
    Dir(PathBuf),
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Synthetic(SyntheticScenes::default())
    }
}

/// Synthetic regression dataset used by `train`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { seed: 0, n_samples: 500, feature_dim: 32, noise_sigma: REGRESSION_NOISE_SIGMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineKind,
    pub method_name: Option<String>,
    pub model: ModelConfig,
    pub scenes: SceneSource,
    pub min_score: f64,
    pub ransac: RansacConfig,
    pub icp: IcpConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Checkpoint directory written by `train`; required by clip and hybrid.
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineKind::Dino,
            method_name: None,
            model: ModelConfig::default(),
            scenes: SceneSource::default(),
            min_score: pose_forge::features::DEFAULT_MIN_SCORE,
            ransac: RansacConfig::default(),
            icp: IcpConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            output: None,
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => {
                let _ = write!(out, "/{index}");
            }
            Segment::Map { key } => {
                let _ = write!(out, "/{}", key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                let _ = write!(out, "/{variant}");
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn invalid(pointer: &str, message: impl ToString) -> CliError {
    CliError::Config { pointer: pointer.to_string(), message: message.to_string() }
}

impl RunConfig {
    /// Parses and validates a config document. Paths are left unresolved.
    pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(e.path());
            invalid(&pointer, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.model.path.as_mut() {
            fix(p);
        }
        if let SceneSource::Dir(p) = &mut self.scenes {
            fix(p);
        }
        if let Some(p) = self.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output.as_mut() {
            fix(p);
        }
    }

    /// `--seed`: replaces the scene, dataset, training and RANSAC seeds.
    pub fn override_seed(&mut self, seed: u64) {
        if let SceneSource::Synthetic(s) = &mut self.scenes {
            s.config.seed = seed;
        }
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.ransac.seed = seed;
    }

    pub fn method_name(&self) -> String {
        self.method_name.clone().unwrap_or_else(|| self.pipeline.default_method_name().to_string())
    }

    /// Value checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(-1.0..=1.0).contains(&self.min_score) {
            return Err(invalid("/min_score", format!("must lie in [-1, 1], got {}", self.min_score)));
        }
        self.ransac.validate().map_err(|e| invalid("/ransac", e))?;
        self.icp.validate().map_err(|e| invalid("/icp", e))?;
        self.train.validate().map_err(|e| invalid("/train", e))?;
        if self.dataset.n_samples == 0 {
            return Err(invalid("/dataset/n_samples", "must be positive"));
        }
        if self.dataset.feature_dim < 2 {
            return Err(invalid("/dataset/feature_dim", "must be at least 2"));
        }
        if !(self.dataset.noise_sigma >= 0.0 && self.dataset.noise_sigma.is_finite()) {
            return Err(invalid("/dataset/noise_sigma", "must be finite and non-negative"));
        }
        if let SceneSource::Synthetic(s) = &self.scenes {
            if s.count == 0 {
                return Err(invalid("/scenes/synthetic/count", "must be positive"));
            }
            s.config.validate().map_err(|e| invalid("/scenes/synthetic/config", e))?;
        }
        if let Some(name) = &self.method_name {
            if name.is_empty() || name.contains(['\n', '\r']) {
                return Err(invalid("/method_name", "must be a non-empty single line"));
            }
        }
        Ok(())
    }

    /// Checks that referenced inputs exist.
    pub fn check_paths(&self, needs_checkpoint: bool) -> Result<(), CliError> {
        if let Some(p) = &self.model.path {
            if !p.is_file() {
                return Err(invalid("/model/path", format!("{} does not exist", p.display())));
            }
        }
        if let SceneSource::Dir(p) = &self.scenes {
            if !p.is_dir() {
                return Err(invalid("/scenes/dir", format!("{} is not a directory", p.display())));
            }
        }
        if needs_checkpoint {
            match &self.checkpoint {
                None => return Err(invalid("/checkpoint", format!("required by the {} pipeline", self.pipeline.default_method_name()))),
                Some(p) if !p.is_dir() => return Err(invalid("/checkpoint", format!("{} is not a directory", p.display()))),
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointer(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(CliError::Config { pointer, .. }) => pointer,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn type_errors_report_json_pointer() {
        assert_eq!(pointer(r#"{"ransac": {"inlier_threshold_px": "x"}}"#), "/ransac/inlier_threshold_px");
        assert_eq!(pointer(r#"{"scenes": {"synthetic": {"config": {"outlier_rate": []}}}}"#), "/scenes/synthetic/config/outlier_rate");
        assert_eq!(pointer(r#"{"pipeline": "nope"}"#), "/pipeline");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert_eq!(pointer(r#"{"icp": {"max_iter": 3}}"#), "/icp/max_iter");
        assert_eq!(pointer(r#"{"bogus": 1}"#), "/bogus");
    }

    #[test]
    fn semantic_errors_report_json_pointer() {
        assert_eq!(pointer(r#"{"scenes": {"synthetic": {"config": {"occlusion_rate": 0.9}}}}"#), "/scenes/synthetic/config");
        assert_eq!(pointer(r#"{"scenes": {"synthetic": {"count": 0}}}"#), "/scenes/synthetic/count");
        assert_eq!(pointer(r#"{"train": {"batch_size": 0}}"#), "/train");
        assert_eq!(pointer(r#"{"min_score": 2}"#), "/min_score");
    }

    #[test]
    fn scene_source_is_exactly_one_variant() {
        assert!(RunConfig::from_json(r#"{"scenes": {"dir": "a", "synthetic": {}}}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"scenes": {"dir": "a"}}"#).unwrap();
        assert_eq!(cfg.scenes, SceneSource::Dir("a".into()));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = RunConfig::from_json(r#"{"scenes": {"dir": "s"}, "checkpoint": "/abs/ck", "output": "o"}"#).unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.scenes, SceneSource::Dir("/base/s".into()));
        assert_eq!(cfg.checkpoint, Some("/abs/ck".into()));
        assert_eq!(cfg.output, Some("/base/o".into()));
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(9);
        let SceneSource::Synthetic(s) = &cfg.scenes else { unreachable!() };
        assert_eq!((s.config.seed, cfg.dataset.seed, cfg.train.seed, cfg.ransac.seed), (9, 9, 9, 9));
    }
}
