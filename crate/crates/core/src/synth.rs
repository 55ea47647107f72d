//! Deterministic synthetic scenes and regression datasets.
//!
//! Every random draw comes from [`rng::stream`] keyed by the scene seed and a
//! purpose label, so a scene is a pure function of its [`SceneConfig`] and
//! model.
//!
//! Scene construction order:
//! 1. keypoints by farthest-point sampling;
//! 2. a pose from [`sample_pose`], redrawn until every keypoint projects into
//!    the image;
//! 3. `⌊occlusion_rate · n⌋` keypoints dropped;
//! 4. Gaussian pixel noise on the visible projections;
//! 5. `⌊outlier_rate · visible⌋` visible entries replaced by uniform pixels;
//! 6. observed cloud = transformed model points plus Gaussian noise;
//! 7. a feature map of random unit descriptors, with each visible keypoint's
//!    template (plus noise) planted at the patch containing its observed image
//!    point, first keypoint winning if two share a patch.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, DenseFeatureMap, FeatureError, FeatureMeta, KeypointTemplate};
use crate::geometry::{quat_to_rotmat, CameraIntrinsics, GeometryError, Pose, Quaternion, Rotation};
use crate::icp::{IcpError, PointCloud};
use crate::model::{self, sample_keypoints, KeypointSet, ModelError, ObjectModel};
use crate::pnp::{Correspondence, MIN_CORRESPONDENCES};
use crate::regressor::Sample;
use crate::rng::{self, Stream};

/// Pose redraws allowed before giving up on fitting all keypoints in view.
pub const MAX_POSE_ATTEMPTS: u64 = 100;
/// Feature noise of [`generate_regression_dataset`].
pub const REGRESSION_NOISE_SIGMA: f64 = 0.01;

pub const CORRESPONDENCES_HEADER: &str = "kp_index,X,Y,Z,u,v,is_outlier";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("config leaves {visible} visible keypoints, need at least {needed}")]
    TooFewVisible { visible: usize, needed: usize },
    #[error("no pose with all keypoints in view after {0} attempts")]
    PlacementFailed(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cloud(#[from] IcpError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub n_keypoints: usize,
    pub pixel_noise_sigma: f64,
    pub outlier_rate: f64,
    pub occlusion_rate: f64,
    pub depth_range_mm: [f64; 2],
    pub cloud_noise_sigma: f64,
    /// Patch size of the synthetic dense feature map.
    pub feature_stride_px: f64,
    pub feature_dim: usize,
    pub descriptor_noise_sigma: f64,
    /// Length of the concatenated visual + semantic regression features.
    pub clip_feature_dim: usize,
    pub clip_feature_noise: f64,
}

pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics { fx: 600.0, fy: 600.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            camera: default_camera(),
            n_keypoints: 20,
            pixel_noise_sigma: 0.0,
            outlier_rate: 0.0,
            occlusion_rate: 0.0,
            depth_range_mm: [700.0, 1100.0],
            cloud_noise_sigma: 0.0,
            feature_stride_px: 4.0,
            feature_dim: 32,
            descriptor_noise_sigma: 0.05,
            clip_feature_dim: 32,
            clip_feature_noise: REGRESSION_NOISE_SIGMA,
        }
    }
}

impl SceneConfig {
    pub fn n_occluded(&self) -> usize {
        (self.occlusion_rate * self.n_keypoints as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: String| Err(SynthError::InvalidConfig(s));
        self.camera.validate()?;
        for (name, rate) in [("outlier_rate", self.outlier_rate), ("occlusion_rate", self.occlusion_rate)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} must be in [0, 1), got {rate}"));
            }
        }
        let [lo, hi] = self.depth_range_mm;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("depth_range_mm must satisfy 0 < min <= max, got [{lo}, {hi}]"));
        }
        for (name, s) in [
            ("pixel_noise_sigma", self.pixel_noise_sigma),
            ("cloud_noise_sigma", self.cloud_noise_sigma),
            ("descriptor_noise_sigma", self.descriptor_noise_sigma),
            ("clip_feature_noise", self.clip_feature_noise),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {s}"));
            }
        }
        if !(self.feature_stride_px > 0.0 && self.feature_stride_px.is_finite()) {
            return bad("feature_stride_px must be positive".into());
        }
        if self.feature_stride_px > self.camera.width.min(self.camera.height) as f64 {
            return bad("feature_stride_px exceeds the image size".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.clip_feature_dim < 7 {
            return bad(format!("clip_feature_dim must be at least 7, got {}", self.clip_feature_dim));
        }
        let visible = self.n_keypoints.saturating_sub(self.n_occluded());
        if visible < MIN_CORRESPONDENCES {
            return Err(SynthError::TooFewVisible { visible, needed: MIN_CORRESPONDENCES });
        }
        Ok(())
    }
}

fn gaussian(r: &mut Stream) -> f64 {
    StandardNormal.sample(r)
}

/// Uniform rotation (normalized 4-Gaussian quaternion), centroid depth
/// uniform in `depth_range_mm`, and the centroid projecting uniformly into
/// the central 80% of the image.
pub fn sample_pose(r: &mut Stream, camera: &CameraIntrinsics, depth_range_mm: [f64; 2], centroid: &Vector3<f64>) -> Pose {
    let rotation = loop {
        let (w, x, y, z) = (gaussian(r), gaussian(r), gaussian(r), gaussian(r));
        if let Ok(q) = Quaternion::new(w, x, y, z) {
            break quat_to_rotmat(&q).expect("unit quaternion");
        }
    };
    let [lo, hi] = depth_range_mm;
    let depth = if hi > lo { r.random_range(lo..hi) } else { lo };
    let (w, h) = (camera.width as f64, camera.height as f64);
    let u = r.random_range(0.1 * w..0.9 * w);
    let v = r.random_range(0.1 * h..0.9 * h);
    let c = Vector3::new((u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth);
    Pose::new(rotation, c - rotation.matrix() * centroid)
}

/// Drill-shaped test object: barrel, chuck, handle and battery pack, 720
/// surface points drawn from a fixed stream (a regular lattice would let ICP
/// lock onto shifted copies of itself), centered on its centroid.
pub fn driller_like() -> ObjectModel {
    let mut r = rng::stream(0, "driller-model", 0);
    let mut pts = Vec::new();
    let mut cylinder = |r: &mut Stream, x0: f64, x1: f64, radius: f64, count: usize| {
        for _ in 0..count {
            let x = r.random_range(x0..x1);
            let a = r.random_range(0.0..std::f64::consts::TAU);
            pts.push(Vector3::new(x, radius * a.cos(), radius * a.sin()));
        }
    };
    cylinder(&mut r, -60.0, 90.0, 28.0, 300);
    cylinder(&mut r, 90.0, 130.0, 14.0, 60);
    let mut boxed = |r: &mut Stream, lo: [f64; 3], hi: [f64; 3], count: usize| {
        let e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        // Face pairs normal to x, y, z, weighted by area.
        let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut pick = r.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= areas[axis] {
                pick -= areas[axis];
                axis += 1;
            }
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = r.random_range(lo[a]..hi[a]);
            }
            p[axis] = if r.random_bool(0.5) { lo[axis] } else { hi[axis] };
            pts.push(Vector3::from(p));
        }
    };
    boxed(&mut r, [-40.0, -130.0, -15.0], [-5.0, -28.0, 15.0], 160);
    boxed(&mut r, [-70.0, -165.0, -35.0], [30.0, -130.0, 35.0], 200);
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let pts = pts.into_iter().map(|p| p - c).collect();
    ObjectModel::new("driller_like", pts, false).expect("driller model is valid")
}

/// The fixed `d × 7` embedding of `(q, t / 1000)` used for regression
/// features. Depends only on `d`.
pub fn regression_embedding(d: usize) -> DMatrix<f64> {
    let mut r = rng::stream(0, "regression-embedding", d as u64);
    DMatrix::from_fn(d, 7, |_, _| gaussian(&mut r))
}

/// Regression target vector `(w, x, y, z, t / 1000)` of a pose, canonical
/// quaternion sign.
pub fn regression_target(pose: &Pose) -> DVector<f64> {
    let q = pose.rotation.to_quaternion();
    let t = pose.translation / 1000.0;
    DVector::from_vec(vec![q.w, q.x, q.y, q.z, t.x, t.y, t.z])
}

/// Visual and semantic halves of `E · target + σ · noise`.
pub fn regression_features(embedding: &DMatrix<f64>, pose: &Pose, sigma: f64, r: &mut Stream) -> (DVector<f64>, DVector<f64>) {
    let mut f = embedding * regression_target(pose);
    for v in f.iter_mut() {
        *v += sigma * gaussian(r);
    }
    let half = f.len() / 2;
    (f.rows(0, half).into_owned(), f.rows(half, f.len() - half).into_owned())
}

pub fn generate_regression_dataset(seed: u64, n: usize, d: usize) -> Result<Vec<Sample>, SynthError> {
    generate_regression_dataset_with_noise(seed, n, d, REGRESSION_NOISE_SIGMA)
}

/// Poses follow [`sample_pose`] with the default camera and depth range,
/// centered on [`driller_like`].
pub fn generate_regression_dataset_with_noise(seed: u64, n: usize, d: usize, sigma: f64) -> Result<Vec<Sample>, SynthError> {
    if n == 0 {
        return Err(SynthError::InvalidConfig("dataset size must be at least 1".into()));
    }
    if d < 7 {
        return Err(SynthError::InvalidConfig(format!("feature dimension must be at least 7, got {d}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SynthError::InvalidConfig(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let cfg = SceneConfig::default();
    let centroid = driller_like().centroid();
    let embedding = regression_embedding(d);
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| {
            let pose = sample_pose(&mut rng::stream(seed, "regression-pose", i), &cfg.camera, cfg.depth_range_mm, &centroid);
            let (visual, semantic) = regression_features(&embedding, &pose, sigma, &mut rng::stream(seed, "regression-noise", i));
            Sample { visual, semantic, pose }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub gt_pose: Pose,
    pub keypoints: KeypointSet,
    /// One entry per visible keypoint, in keypoint order.
    pub correspondences: Vec<Correspondence>,
    /// Keypoint index of each correspondence.
    pub kp_indices: Vec<usize>,
    /// True where the image point was replaced by a uniform outlier.
    pub outlier_mask: Vec<bool>,
    /// Noise-free projections, aligned with `correspondences`.
    pub clean_image_points: Vec<Vector2<f64>>,
    pub observed_cloud: PointCloud,
    pub feature_map: DenseFeatureMap,
    /// One template per keypoint.
    pub templates: Vec<KeypointTemplate>,
    /// Patch `(row, col)` where each keypoint's template was planted.
    pub planted: Vec<Option<(usize, usize)>>,
    pub clip_visual: DVector<f64>,
    pub clip_semantic: DVector<f64>,
}

fn random_unit(r: &mut Stream, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig, model: &ObjectModel) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let k = &cfg.camera;
    let keypoints = sample_keypoints(model, cfg.n_keypoints, seed)?;
    let centroid = model.centroid();

    let mut placed = None;
    for attempt in 0..MAX_POSE_ATTEMPTS {
        let pose = sample_pose(&mut rng::stream(seed, "pose", attempt), k, cfg.depth_range_mm, &centroid);
        let projections: Option<Vec<Vector2<f64>>> =
            keypoints.positions.iter().map(|x| crate::geometry::project(k, &pose, x).ok().filter(|uv| k.contains(uv))).collect();
        if let Some(p) = projections {
            placed = Some((pose, p));
            break;
        }
    }
    let (gt_pose, clean) = placed.ok_or(SynthError::PlacementFailed(MAX_POSE_ATTEMPTS))?;

    let n = keypoints.len();
    let mut occluded = vec![false; n];
    for i in index::sample(&mut rng::stream(seed, "occlusion", 0), n, cfg.n_occluded()) {
        occluded[i] = true;
    }
    let visible: Vec<usize> = (0..n).filter(|&i| !occluded[i]).collect();

    let mut noise = rng::stream(seed, "pixel-noise", 0);
    let mut observed: Vec<Vector2<f64>> =
        visible.iter().map(|&i| clean[i] + Vector2::new(gaussian(&mut noise), gaussian(&mut noise)) * cfg.pixel_noise_sigma).collect();
    let n_outliers = (cfg.outlier_rate * visible.len() as f64).floor() as usize;
    let mut outlier_mask = vec![false; visible.len()];
    let mut r = rng::stream(seed, "outliers", 0);
    let mut chosen: Vec<usize> = index::sample(&mut r, visible.len(), n_outliers).into_vec();
    chosen.sort_unstable();
    for j in chosen {
        outlier_mask[j] = true;
        observed[j] = Vector2::new(r.random_range(0.0..k.width as f64), r.random_range(0.0..k.height as f64));
    }

    let mut r = rng::stream(seed, "cloud", 0);
    let cloud: Vec<Vector3<f64>> = model
        .points()
        .iter()
        .map(|x| gt_pose.apply(x) + Vector3::new(gaussian(&mut r), gaussian(&mut r), gaussian(&mut r)) * cfg.cloud_noise_sigma)
        .collect();

    let stride = cfg.feature_stride_px;
    let grid_w = (k.width as f64 / stride).floor() as usize;
    let grid_h = (k.height as f64 / stride).floor() as usize;
    let dim = cfg.feature_dim;
    let mut r = rng::stream(seed, "descriptors", 0);
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for _ in 0..grid_h * grid_w {
        data.extend(random_unit(&mut r, dim).into_iter().map(|v| v as f32));
    }
    let meta = FeatureMeta {
        stride_px: stride,
        origin_px: [stride / 2.0, stride / 2.0],
        image_size: [k.width, k.height],
        model: "synthetic-dense".into(),
    };
    let mut feature_map = DenseFeatureMap::new(grid_h, grid_w, dim, meta, data)?;

    let mut r = rng::stream(seed, "templates", 0);
    let templates = keypoints
        .model_indices
        .iter()
        .map(|&m| KeypointTemplate::normalized(m, random_unit(&mut r, dim)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut planted = vec![None; n];
    let mut taken = vec![false; grid_h * grid_w];
    let mut r = rng::stream(seed, "planting", 0);
    for (j, &i) in visible.iter().enumerate() {
        let noise: Vec<f64> = (0..dim).map(|_| gaussian(&mut r) * cfg.descriptor_noise_sigma).collect();
        let Some((row, col)) = feature_map.patch_containing(&observed[j]) else { continue };
        if std::mem::replace(&mut taken[row * grid_w + col], true) {
            continue;
        }
        for ((dst, t), e) in feature_map.descriptor_mut(row, col).iter_mut().zip(templates[i].descriptor()).zip(&noise) {
            *dst = (t + e) as f32;
        }
        planted[i] = Some((row, col));
    }

    let (clip_visual, clip_semantic) = regression_features(
        &regression_embedding(cfg.clip_feature_dim),
        &gt_pose,
        cfg.clip_feature_noise,
        &mut rng::stream(seed, "clip-noise", 0),
    );

    Ok(Scene {
        seed,
        camera: *k,
        gt_pose,
        correspondences: visible.iter().zip(&observed).map(|(&i, uv)| Correspondence::new(keypoints.positions[i], *uv)).collect(),
        kp_indices: visible.clone(),
        outlier_mask,
        clean_image_points: visible.iter().map(|&i| clean[i]).collect(),
        keypoints,
        observed_cloud: PointCloud::new(cloud)?,
        feature_map,
        templates,
        planted,
        clip_visual,
        clip_semantic,
    })
}

/// Side information that does not fit the fixed-format scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub model: String,
    pub keypoint_model_indices: Vec<usize>,
    pub planted: Vec<Option<[usize; 2]>>,
    pub clean_image_points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

pub fn write_pose_json(path: &Path, pose: &Pose) -> Result<(), SynthError> {
    let t = pose.translation;
    let file = PoseFile { r: pose.rotation.rows(), t: [t.x, t.y, t.z] };
    let text = serde_json::to_string_pretty(&file).expect("pose serializes") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_pose_json(path: &Path) -> Result<Pose, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: PoseFile =
        serde_json::from_str(&text).map_err(|e| SynthError::Parse { path: path.to_path_buf(), line: e.line(), reason: e.to_string() })?;
    Ok(Pose::new(Rotation::from_rows(file.r)?, Vector3::from(file.t)))
}

fn clip_map(camera: &CameraIntrinsics, v: &DVector<f64>) -> Result<DenseFeatureMap, FeatureError> {
    let meta = FeatureMeta {
        stride_px: camera.width.max(camera.height) as f64,
        origin_px: [camera.width as f64 / 2.0, camera.height as f64 / 2.0],
        image_size: [camera.width, camera.height],
        model: "synthetic-clip".into(),
    };
    DenseFeatureMap::new(1, 1, v.len(), meta, v.iter().map(|&x| x as f32).collect())
}

/// Writes `correspondences.csv`, `cloud.xyz`, `features.vfmt`,
/// `templates.vfmt`, `clip_visual.vfmt`, `clip_semantic.vfmt` (each with a
/// `.meta.json` sidecar), `gt_pose.json` and `scene.json` into `dir`.
pub fn export_scene(dir: &Path, scene: &Scene, model_name: &str) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut csv = format!("{CORRESPONDENCES_HEADER}\n");
    for ((c, kp), outlier) in scene.correspondences.iter().zip(&scene.kp_indices).zip(&scene.outlier_mask) {
        let (x, uv) = (c.model_point, c.image_point);
        csv.push_str(&format!("{kp},{:?},{:?},{:?},{:?},{:?},{}\n", x.x, x.y, x.z, uv.x, uv.y, u8::from(*outlier)));
    }
    let path = dir.join("correspondences.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    let path = dir.join("cloud.xyz");
    model::write_xyz(&path, scene.observed_cloud.points()).map_err(io_err(&path))?;
    features::write_feature_map(&dir.join("features.vfmt"), &scene.feature_map)?;
    features::write_templates(&dir.join("templates.vfmt"), model_name, &scene.templates)?;
    features::write_feature_map(&dir.join("clip_visual.vfmt"), &clip_map(&scene.camera, &scene.clip_visual)?)?;
    features::write_feature_map(&dir.join("clip_semantic.vfmt"), &clip_map(&scene.camera, &scene.clip_semantic)?)?;
    write_pose_json(&dir.join("gt_pose.json"), &scene.gt_pose)?;
    let meta = SceneMeta {
        seed: scene.seed,
        camera: scene.camera,
        model: model_name.to_string(),
        keypoint_model_indices: scene.keypoints.model_indices.clone(),
        planted: scene.planted.iter().map(|p| p.map(|(r, c)| [r, c])).collect(),
        clean_image_points: scene.clean_image_points.iter().map(|p| [p.x, p.y]).collect(),
    };
    let path = dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("scene meta serializes") + "\n").map_err(io_err(&path))
}

/// Correspondences with their keypoint indices and outlier flags.
type ParsedCorrespondences = (Vec<Correspondence>, Vec<usize>, Vec<bool>);

fn parse_correspondences(path: &Path) -> Result<ParsedCorrespondences, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let fail = |line: usize, reason: String| SynthError::Parse { path: path.to_path_buf(), line, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CORRESPONDENCES_HEADER => {}
        _ => return Err(fail(1, format!("expected header {CORRESPONDENCES_HEADER}"))),
    }
    let (mut corrs, mut kps, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(fail(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| fail(i + 1, format!("not a number: {s:?}")));
        let kp = f[0].parse::<usize>().map_err(|_| fail(i + 1, format!("bad kp_index {:?}", f[0])))?;
        let outlier = match f[6] {
            "0" => false,
            "1" => true,
            other => return Err(fail(i + 1, format!("is_outlier must be 0 or 1, found {other:?}"))),
        };
        corrs.push(Correspondence::new(Vector3::new(num(f[1])?, num(f[2])?, num(f[3])?), Vector2::new(num(f[4])?, num(f[5])?)));
        kps.push(kp);
        mask.push(outlier);
    }
    Ok((corrs, kps, mask))
}

fn load_vector(path: &Path) -> Result<DVector<f64>, SynthError> {
    let map = features::load_feature_map(path)?;
    Ok(DVector::from_iterator(map.data().len(), map.data().iter().map(|&v| v as f64)))
}

/// Reads a directory written by [`export_scene`]. Descriptor and feature
/// values come back at f32 precision.
pub fn load_scene(dir: &Path, model: &ObjectModel) -> Result<Scene, SynthError> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: SceneMeta =
        serde_json::from_str(&text).map_err(|e| SynthError::Parse { path: path.clone(), line: e.line(), reason: e.to_string() })?;
    let keypoints = KeypointSet::from_indices(model, meta.keypoint_model_indices.clone())?;
    let (correspondences, kp_indices, outlier_mask) = parse_correspondences(&dir.join("correspondences.csv"))?;
    let cloud_path = dir.join("cloud.xyz");
    let cloud_text = fs::read_to_string(&cloud_path).map_err(io_err(&cloud_path))?;
    let templates = features::load_templates(&dir.join("templates.vfmt"))?;
    if templates.len() != keypoints.len() {
        return Err(SynthError::Parse {
            path: dir.join("templates.vfmt"),
            line: 0,
            reason: format!("{} templates for {} keypoints", templates.len(), keypoints.len()),
        });
    }
    Ok(Scene {
        seed: meta.seed,
        camera: meta.camera,
        gt_pose: read_pose_json(&dir.join("gt_pose.json"))?,
        keypoints,
        correspondences,
        kp_indices,
        outlier_mask,
        clean_image_points: meta.clean_image_points.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
        observed_cloud: PointCloud::new(model::parse_xyz(&cloud_text)?)?,
        feature_map: features::load_feature_map(&dir.join("features.vfmt"))?,
        templates,
        planted: meta.planted.iter().map(|p| p.map(|[r, c]| (r, c))).collect(),
        clip_visual: load_vector(&dir.join("clip_visual.vfmt"))?,
        clip_semantic: load_vector(&dir.join("clip_semantic.vfmt"))?,
    })
}
