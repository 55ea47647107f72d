//! Dense patch-descriptor maps and template keypoint matching.
//!
//! Matching is a nearest-neighbour search under cosine similarity: each
//! template descriptor is compared with every patch of the map and the best
//! patch center becomes the detection. Detections therefore sit on the patch
//! lattice; there is no sub-patch refinement. This stands in for a learned
//! keypoint head.

use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::KeypointSet;
use crate::pnp::{Correspondence, MIN_CORRESPONDENCES};
use crate::vfmt::{self, Tensor, VfmtError};

pub const DEFAULT_MIN_SCORE: f64 = 0.3;

/// Allowed deviation of a template descriptor's norm from 1.
const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Vfmt(#[from] VfmtError),
    #[error("{path}: expected a rank-{expected} tensor, got shape {dims:?}")]
    Rank { path: PathBuf, expected: usize, dims: Vec<usize> },
    #[error("invalid feature map: {0}")]
    InvalidMap(String),
    #[error("descriptor dimension mismatch: map has {map}, template {template} has {found}")]
    DimensionMismatch { map: usize, template: usize, found: usize },
    #[error("template descriptor is zero or non-finite")]
    DegenerateDescriptor,
    #[error("template descriptor norm {norm} is not 1")]
    NotUnitNorm { norm: f64 },
    #[error("{detections} detections for {keypoints} keypoints")]
    LengthMismatch { detections: usize, keypoints: usize },
    #[error("only {got} correspondences survive matching, need {needed}")]
    InsufficientCorrespondences { needed: usize, got: usize },
}

/// Sidecar of a feature map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub stride_px: f64,
    pub origin_px: [f64; 2],
    pub image_size: [u32; 2],
    pub model: String,
}

/// `grid_h × grid_w × dim` descriptors, row-major, plus the patch lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    meta: FeatureMeta,
    data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, meta: FeatureMeta, data: Vec<f32>) -> Result<Self, FeatureError> {
        if dim == 0 || grid_h == 0 || grid_w == 0 {
            return Err(FeatureError::InvalidMap(format!("empty grid {grid_h}x{grid_w}x{dim}")));
        }
        if !(meta.stride_px > 0.0 && meta.stride_px.is_finite()) {
            return Err(FeatureError::InvalidMap(format!("stride_px must be positive, got {}", meta.stride_px)));
        }
        if meta.origin_px.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidMap("origin_px must be finite".into()));
        }
        if data.len() != grid_h * grid_w * dim {
            return Err(FeatureError::InvalidMap(format!("{} values for a {grid_h}x{grid_w}x{dim} grid", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidMap("non-finite descriptor value".into()));
        }
        let map = DenseFeatureMap { grid_h, grid_w, dim, meta, data };
        let last = map.patch_center(grid_h - 1, grid_w - 1);
        let [w, h] = map.meta.image_size;
        let inside = |p: Vector2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64;
        if !inside(map.patch_center(0, 0)) || !inside(last) {
            return Err(FeatureError::InvalidMap(format!("patch centers fall outside the {w}x{h} image")));
        }
        Ok(map)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meta(&self) -> &FeatureMeta {
        &self.meta
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        let at = (row * self.grid_w + col) * self.dim;
        &self.data[at..at + self.dim]
    }

    pub fn descriptor_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let at = (row * self.grid_w + col) * self.dim;
        &mut self.data[at..at + self.dim]
    }

    pub fn patch_center(&self, row: usize, col: usize) -> Vector2<f64> {
        let [ou, ov] = self.meta.origin_px;
        Vector2::new(ou + self.meta.stride_px * col as f64, ov + self.meta.stride_px * row as f64)
    }

    /// Patch whose center is closest to `uv`, if `uv` lies within the grid.
    pub fn patch_containing(&self, uv: &Vector2<f64>) -> Option<(usize, usize)> {
        let [ou, ov] = self.meta.origin_px;
        let col = ((uv.x - ou) / self.meta.stride_px).round();
        let row = ((uv.y - ov) / self.meta.stride_px).round();
        let valid = |k: f64, n: usize| k >= 0.0 && k < n as f64;
        (valid(row, self.grid_h) && valid(col, self.grid_w)).then_some((row as usize, col as usize))
    }
}

/// Loads `path` and its `<stem>.meta.json` sidecar.
pub fn load_feature_map(path: &Path) -> Result<DenseFeatureMap, FeatureError> {
    let tensor = vfmt::read_tensor(path)?;
    let meta: FeatureMeta = vfmt::read_sidecar(path)?;
    let [h, w, d] = match *tensor.dims() {
        [h, w, d] => [h, w, d],
        _ => return Err(FeatureError::Rank { path: path.to_path_buf(), expected: 3, dims: tensor.dims().to_vec() }),
    };
    DenseFeatureMap::new(h, w, d, meta, tensor.into_data())
}

pub fn write_feature_map(path: &Path, map: &DenseFeatureMap) -> Result<(), FeatureError> {
    let tensor = Tensor::new(vec![map.grid_h, map.grid_w, map.dim], map.data.clone())?;
    vfmt::write_tensor(path, &tensor)?;
    vfmt::write_sidecar(path, &map.meta)?;
    Ok(())
}

/// Descriptor for one keypoint, unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTemplate {
    /// Index of the keypoint's vertex in the object model.
    pub model_index: usize,
    descriptor: Vec<f64>,
}

impl KeypointTemplate {
    /// Checks the unit-norm invariant.
    pub fn new(model_index: usize, descriptor: Vec<f64>) -> Result<Self, FeatureError> {
        let norm = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(FeatureError::DegenerateDescriptor);
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(FeatureError::NotUnitNorm { norm });
        }
        Ok(KeypointTemplate { model_index, descriptor })
    }

    /// Scales `descriptor` to unit norm first.
    pub fn normalized(model_index: usize, descriptor: Vec<f64>) -> Result<Self, FeatureError> {
        let norm = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(FeatureError::DegenerateDescriptor);
        }
        Self::new(model_index, descriptor.into_iter().map(|v| v / norm).collect())
    }

    pub fn descriptor(&self) -> &[f64] {
        &self.descriptor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMeta {
    pub model: String,
    pub model_indices: Vec<usize>,
}

/// Templates are stored as an `n × dim` tensor; the sidecar lists model
/// indices. Descriptors are renormalized after the f32 round trip.
pub fn write_templates(path: &Path, model: &str, templates: &[KeypointTemplate]) -> Result<(), FeatureError> {
    let dim = templates.first().map_or(0, |t| t.descriptor.len());
    let data: Vec<f64> = templates.iter().flat_map(|t| t.descriptor.iter().copied()).collect();
    vfmt::write_tensor(path, &Tensor::from_f64(vec![templates.len(), dim], &data)?)?;
    let meta = TemplateMeta { model: model.to_string(), model_indices: templates.iter().map(|t| t.model_index).collect() };
    vfmt::write_sidecar(path, &meta)?;
    Ok(())
}

pub fn load_templates(path: &Path) -> Result<Vec<KeypointTemplate>, FeatureError> {
    let tensor = vfmt::read_tensor(path)?;
    let meta: TemplateMeta = vfmt::read_sidecar(path)?;
    let [n, dim] = match *tensor.dims() {
        [n, d] if n == meta.model_indices.len() => [n, d],
        _ => return Err(FeatureError::Rank { path: path.to_path_buf(), expected: 2, dims: tensor.dims().to_vec() }),
    };
    let data = tensor.data();
    (0..n)
        .map(|i| {
            let d = data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect();
            KeypointTemplate::normalized(meta.model_indices[i], d)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_point: Vector2<f64>,
    /// Cosine similarity in `[-1, 1]`.
    pub score: f64,
    pub row: usize,
    pub col: usize,
}

/// L2-normalized patch descriptors in f64. All-zero patches stay zero and
/// score 0 against every template.
fn normalized_patches(map: &DenseFeatureMap) -> Vec<f64> {
    let mut out = Vec::with_capacity(map.data.len());
    for patch in map.data.chunks_exact(map.dim) {
        let norm = patch.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        out.extend(patch.iter().map(|&v| v as f64 * inv));
    }
    out
}

/// Best-matching patch per template; `None` where the best score is below
/// `min_score`. Ties go to the lowest row-major patch index.
pub fn match_keypoints(
    map: &DenseFeatureMap,
    templates: &[KeypointTemplate],
    min_score: f64,
) -> Result<Vec<Option<Detection>>, FeatureError> {
    for (i, t) in templates.iter().enumerate() {
        if t.descriptor.len() != map.dim {
            return Err(FeatureError::DimensionMismatch { map: map.dim, template: i, found: t.descriptor.len() });
        }
    }
    let patches = normalized_patches(map);
    let detections = templates
        .par_iter()
        .map(|t| {
            let mut best_index = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (index, patch) in patches.chunks_exact(map.dim).enumerate() {
                let score = patch.iter().zip(&t.descriptor).map(|(a, b)| a * b).sum::<f64>();
                if score > best_score {
                    best_score = score;
                    best_index = index;
                }
            }
            let score = best_score.clamp(-1.0, 1.0);
            (score >= min_score).then(|| {
                let (row, col) = (best_index / map.grid_w, best_index % map.grid_w);
                Detection { image_point: map.patch_center(row, col), score, row, col }
            })
        })
        .collect();
    Ok(detections)
}

/// Pairs present detections with their keypoints' model positions, in
/// template order.
pub fn build_correspondences(detections: &[Option<Detection>], keypoints: &KeypointSet) -> Result<Vec<Correspondence>, FeatureError> {
    if detections.len() != keypoints.len() {
        return Err(FeatureError::LengthMismatch { detections: detections.len(), keypoints: keypoints.len() });
    }
    let corrs: Vec<Correspondence> =
        detections.iter().zip(&keypoints.positions).filter_map(|(d, x)| d.map(|d| Correspondence::new(*x, d.image_point))).collect();
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(FeatureError::InsufficientCorrespondences { needed: MIN_CORRESPONDENCES, got: corrs.len() });
    }
    Ok(corrs)
}
