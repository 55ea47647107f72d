//! Pose regression head: `D → 256 → 256 → 7` MLP with tanh hidden layers.
//!
//! The input is the concatenation of a visual and a semantic feature vector.
//! Output entries 0..4 are a raw quaternion `(w, x, y, z)` that is normalized
//! before use; entries 4..7 are translation, multiplied by
//! `translation_scale_mm` so the network works with O(1) values.
//!
//! Training minimizes the mean over a batch of
//! `1 − ⟨q, q_gt⟩² + λ_t ‖t − t_gt‖²` with hand-written backpropagation and
//! AdamW (decoupled weight decay, PyTorch convention: the decay step is
//! `lr · weight_decay · p`).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{quat_to_rotmat, Pose, Quaternion};
use crate::rng;
use crate::vfmt::{self, Tensor, VfmtError};

pub const HIDDEN: usize = 256;
pub const OUTPUT: usize = 7;
/// Raw quaternion norms below this are rejected.
pub const MIN_QUAT_NORM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("input dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate output: raw quaternion norm {norm:e}")]
    DegenerateOutput { norm: f64 },
    #[error("non-finite values in {layer}")]
    NumericFailure { layer: &'static str },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training { epoch: usize, batch: usize, source: Box<RegressorError> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vfmt(#[from] VfmtError),
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visual: DVector<f64>,
    pub semantic: DVector<f64>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
    pub translation_scale_mm: f64,
}

const TENSOR_NAMES: [&str; 6] = ["l1.weight", "l1.bias", "l2.weight", "l2.bias", "l3.weight", "l3.bias"];

impl MlpParams {
    /// Uniform(±1/√fan_in) weights and biases drawn from `seed`.
    pub fn init(input_dim: usize, seed: u64, translation_scale_mm: f64) -> Self {
        let mut r = rng::stream(seed, "mlp-init", 0);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| r.random_range(-a..a));
            let b = DVector::from_fn(fan_out, |_, _| r.random_range(-a..a));
            (w, b)
        };
        let (w1, b1) = layer(input_dim, HIDDEN);
        let (w2, b2) = layer(HIDDEN, HIDDEN);
        let (w3, b3) = layer(HIDDEN, OUTPUT);
        MlpParams { w1, b1, w2, b2, w3, b3, translation_scale_mm }
    }

    /// All-zero parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        MlpParams {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
            w3: DMatrix::zeros(self.w3.nrows(), self.w3.ncols()),
            b3: DVector::zeros(self.b3.len()),
            translation_scale_mm: self.translation_scale_mm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice(), self.w3.as_slice(), self.b3.as_slice()]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Network output before canonicalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Unit quaternion `(w, x, y, z)` with the sign the network produced.
    pub quat: Vector4<f64>,
    pub translation: Vector3<f64>,
}

impl Prediction {
    pub fn quaternion(&self) -> Quaternion {
        Quaternion::new(self.quat[0], self.quat[1], self.quat[2], self.quat[3]).expect("prediction quaternion is unit norm")
    }

    pub fn pose(&self) -> Pose {
        let r = quat_to_rotmat(&self.quaternion()).expect("prediction quaternion is unit norm");
        Pose::new(r, self.translation)
    }
}

fn quat_vector(q: &Quaternion) -> Vector4<f64> {
    Vector4::new(q.w, q.x, q.y, q.z)
}

/// Concatenates `visual ⊕ semantic` for a batch, one column per sample.
fn input_matrix(params: &MlpParams, batch: &[&Sample]) -> Result<DMatrix<f64>, RegressorError> {
    let d = params.input_dim();
    let mut x = DMatrix::zeros(d, batch.len());
    for (j, s) in batch.iter().enumerate() {
        let found = s.visual.len() + s.semantic.len();
        if found != d {
            return Err(RegressorError::DimensionMismatch { expected: d, found });
        }
        x.view_mut((0, j), (s.visual.len(), 1)).copy_from(&s.visual);
        x.view_mut((s.visual.len(), j), (s.semantic.len(), 1)).copy_from(&s.semantic);
    }
    Ok(x)
}

fn add_bias(mut m: DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        col += b;
    }
    m
}

fn check(m: &DMatrix<f64>, layer: &'static str) -> Result<(), RegressorError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RegressorError::NumericFailure { layer })
    }
}

struct Activations {
    x: DMatrix<f64>,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn forward_batch(params: &MlpParams, x: DMatrix<f64>) -> Result<Activations, RegressorError> {
    let h1 = add_bias(&params.w1 * &x, &params.b1).map(f64::tanh);
    check(&h1, "hidden layer 1")?;
    let h2 = add_bias(&params.w2 * &h1, &params.b2).map(f64::tanh);
    check(&h2, "hidden layer 2")?;
    let out = add_bias(&params.w3 * &h2, &params.b3);
    check(&out, "output layer")?;
    Ok(Activations { x, h1, h2, out })
}

fn split_output(params: &MlpParams, out: &DMatrix<f64>, j: usize) -> Result<(Prediction, f64), RegressorError> {
    let raw = Vector4::new(out[(0, j)], out[(1, j)], out[(2, j)], out[(3, j)]);
    let norm = raw.norm();
    if !(norm >= MIN_QUAT_NORM) {
        return Err(RegressorError::DegenerateOutput { norm });
    }
    let translation = Vector3::new(out[(4, j)], out[(5, j)], out[(6, j)]) * params.translation_scale_mm;
    Ok((Prediction { quat: raw / norm, translation }, norm))
}

pub fn forward(params: &MlpParams, visual: &DVector<f64>, semantic: &DVector<f64>) -> Result<Prediction, RegressorError> {
    let sample = Sample { visual: visual.clone(), semantic: semantic.clone(), pose: Pose::identity() };
    Ok(predict_batch(params, &[&sample])?.remove(0))
}

pub fn predict_batch(params: &MlpParams, batch: &[&Sample]) -> Result<Vec<Prediction>, RegressorError> {
    let acts = forward_batch(params, input_matrix(params, batch)?)?;
    (0..batch.len()).map(|j| split_output(params, &acts.out, j).map(|(p, _)| p)).collect()
}

/// `1 − ⟨q, q_gt⟩² + λ_t ‖t − t_gt‖²`.
pub fn loss(pred: &Prediction, gt: &Pose, lambda_t: f64) -> f64 {
    let q_gt = quat_vector(&gt.rotation.to_quaternion());
    let d = pred.quat.dot(&q_gt);
    (1.0 - d * d) + lambda_t * (pred.translation - gt.translation).norm_squared()
}

/// Mean loss over `samples`.
pub fn mean_loss(params: &MlpParams, samples: &[Sample], lambda_t: f64) -> Result<f64, RegressorError> {
    if samples.is_empty() {
        return Err(RegressorError::EmptyBatch);
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let preds = predict_batch(params, &refs)?;
    Ok(preds.iter().zip(samples).map(|(p, s)| loss(p, &s.pose, lambda_t)).sum::<f64>() / samples.len() as f64)
}

/// Mean loss and its gradient over the batch (weight decay not included).
pub fn backward(params: &MlpParams, batch: &[&Sample], lambda_t: f64) -> Result<(f64, MlpParams), RegressorError> {
    if batch.is_empty() {
        return Err(RegressorError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let acts = forward_batch(params, input_matrix(params, batch)?)?;
    let mut d_out = DMatrix::zeros(OUTPUT, batch.len());
    let mut total = 0.0;
    for (j, s) in batch.iter().enumerate() {
        let (pred, norm) = split_output(params, &acts.out, j)?;
        total += loss(&pred, &s.pose, lambda_t);
        let q_gt = quat_vector(&s.pose.rotation.to_quaternion());
        let q = pred.quat;
        // dL/dq for the unit quaternion, then through q = raw / ‖raw‖.
        let dq = q_gt * (-2.0 * q.dot(&q_gt));
        let d_raw = (dq - q * q.dot(&dq)) / norm;
        let dt = (pred.translation - s.pose.translation) * (2.0 * lambda_t * params.translation_scale_mm);
        for k in 0..4 {
            d_out[(k, j)] = d_raw[k] / n;
        }
        for k in 0..3 {
            d_out[(4 + k, j)] = dt[k] / n;
        }
    }
    let mut grad = params.zeros_like();
    grad.w3 = &d_out * acts.h2.transpose();
    grad.b3 = d_out.column_sum();
    let d_h2 = (params.w3.transpose() * &d_out).component_mul(&acts.h2.map(|h| 1.0 - h * h));
    grad.w2 = &d_h2 * acts.h1.transpose();
    grad.b2 = d_h2.column_sum();
    let d_h1 = (params.w2.transpose() * &d_h2).component_mul(&acts.h1.map(|h| 1.0 - h * h));
    grad.w1 = &d_h1 * acts.x.transpose();
    grad.b1 = d_h1.column_sum();
    if !grad.is_finite() {
        return Err(RegressorError::NumericFailure { layer: "gradient" });
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the squared translation error, per mm².
    pub lambda_t: f64,
    pub translation_scale_mm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 16,
            seed: 0,
            lambda_t: 1e-4,
            translation_scale_mm: 1000.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        let bad = |what: &str| Err(RegressorError::InvalidConfig(what.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda_t > 0.0 && self.lambda_t.is_finite()) {
            return bad("lambda_t must be positive");
        }
        if !(self.translation_scale_mm > 0.0 && self.translation_scale_mm.is_finite()) {
            return bad("translation_scale_mm must be positive");
        }
        Ok(())
    }
}

struct AdamW {
    m: MlpParams,
    v: MlpParams,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl AdamW {
    fn new(params: &MlpParams) -> Self {
        AdamW { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    fn update(&mut self, params: &mut MlpParams, grad: &MlpParams, lr: f64, wd: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let grads = grad.tensors();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(self.m.tensors_mut()).zip(self.v.tensors_mut()) {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * wd * p[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// `loss_trace[0]` is the mean loss at initialization, `loss_trace[e]`
    /// the mean loss over the whole dataset after epoch `e`.
    pub loss_trace: Vec<f64>,
}

/// Trains from the seed's initialization.
pub fn train(cfg: &TrainConfig, dataset: &[Sample]) -> Result<TrainOutcome, RegressorError> {
    let first = dataset.first().ok_or(RegressorError::EmptyBatch)?;
    let params = MlpParams::init(first.visual.len() + first.semantic.len(), cfg.seed, cfg.translation_scale_mm);
    train_from(cfg, params, dataset)
}

pub fn train_from(cfg: &TrainConfig, mut params: MlpParams, dataset: &[Sample]) -> Result<TrainOutcome, RegressorError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(RegressorError::EmptyBatch);
    }
    let wrap = |epoch: usize, batch: usize| move |e: RegressorError| RegressorError::Training { epoch, batch, source: Box::new(e) };
    let mut opt = AdamW::new(&params);
    let mut trace = vec![mean_loss(&params, dataset, cfg.lambda_t).map_err(wrap(0, 0))?];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(cfg.seed, "mlp-shuffle", epoch as u64);
        order.shuffle(&mut r);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (_, grad) = backward(&params, &batch, cfg.lambda_t).map_err(wrap(epoch, b))?;
            opt.update(&mut params, &grad, cfg.learning_rate, cfg.weight_decay);
            if !params.is_finite() {
                return Err(wrap(epoch, b)(RegressorError::NumericFailure { layer: "parameters" }));
            }
        }
        trace.push(mean_loss(&params, dataset, cfg.lambda_t).map_err(wrap(epoch, 0))?);
    }
    Ok(TrainOutcome { params, loss_trace: trace })
}

/// `epoch,loss` CSV.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        s.push_str(&format!("{e},{l:?}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub file: String,
    /// `[rows, cols]` for weights, `[len]` for biases.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub output: usize,
    pub activation: String,
    pub translation_scale_mm: f64,
    pub tensors: Vec<CheckpointTensor>,
}

pub const CHECKPOINT_META: &str = "checkpoint.meta.json";

fn checkpoint_meta(params: &MlpParams) -> CheckpointMeta {
    let shapes = [vec![HIDDEN, params.input_dim()], vec![HIDDEN], vec![HIDDEN, HIDDEN], vec![HIDDEN], vec![OUTPUT, HIDDEN], vec![OUTPUT]];
    CheckpointMeta {
        architecture: "mlp".into(),
        input_dim: params.input_dim(),
        hidden: [HIDDEN, HIDDEN],
        output: OUTPUT,
        activation: "tanh".into(),
        translation_scale_mm: params.translation_scale_mm,
        tensors: TENSOR_NAMES
            .iter()
            .zip(shapes)
            .map(|(name, shape)| CheckpointTensor { name: name.to_string(), file: format!("{name}.vfmt"), shape })
            .collect(),
    }
}

/// Row-major copy of a column-major matrix.
fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Writes one f32 VFMT file per tensor into `dir` plus
/// [`CHECKPOINT_META`]. Values are rounded to f32.
pub fn save_checkpoint(dir: &Path, params: &MlpParams) -> Result<(), RegressorError> {
    fs::create_dir_all(dir).map_err(|e| RegressorError::Checkpoint { path: dir.to_path_buf(), reason: e.to_string() })?;
    let meta = checkpoint_meta(params);
    let data = [
        row_major(&params.w1),
        params.b1.as_slice().to_vec(),
        row_major(&params.w2),
        params.b2.as_slice().to_vec(),
        row_major(&params.w3),
        params.b3.as_slice().to_vec(),
    ];
    for (t, values) in meta.tensors.iter().zip(data) {
        vfmt::write_tensor(&dir.join(&t.file), &Tensor::from_f64(t.shape.clone(), &values)?)?;
    }
    let path = dir.join(CHECKPOINT_META);
    let text = serde_json::to_string_pretty(&meta).expect("checkpoint meta serializes") + "\n";
    fs::write(&path, text).map_err(|e| RegressorError::Checkpoint { path, reason: e.to_string() })
}

pub fn load_checkpoint(dir: &Path) -> Result<MlpParams, RegressorError> {
    let path = dir.join(CHECKPOINT_META);
    let fail = |reason: String| RegressorError::Checkpoint { path: path.clone(), reason };
    let text = fs::read_to_string(&path).map_err(|e| fail(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    if meta.hidden != [HIDDEN, HIDDEN] || meta.output != OUTPUT || meta.activation != "tanh" {
        return Err(fail(format!("unsupported architecture {:?} {}", meta.hidden, meta.activation)));
    }
    let expected = checkpoint_meta(&MlpParams::init(meta.input_dim, 0, meta.translation_scale_mm));
    let mut params = MlpParams::init(meta.input_dim, 0, meta.translation_scale_mm);
    for want in &expected.tensors {
        let entry = meta.tensors.iter().find(|t| t.name == want.name).ok_or_else(|| fail(format!("missing tensor {}", want.name)))?;
        let tensor = vfmt::read_tensor(&dir.join(&entry.file))?;
        if tensor.dims() != want.shape.as_slice() {
            return Err(fail(format!("tensor {} has shape {:?}, expected {:?}", want.name, tensor.dims(), want.shape)));
        }
        let values: Vec<f64> = tensor.data().iter().map(|&v| v as f64).collect();
        match want.name.as_str() {
            "l1.weight" => params.w1 = DMatrix::from_row_slice(HIDDEN, meta.input_dim, &values),
            "l1.bias" => params.b1 = DVector::from_vec(values),
            "l2.weight" => params.w2 = DMatrix::from_row_slice(HIDDEN, HIDDEN, &values),
            "l2.bias" => params.b2 = DVector::from_vec(values),
            "l3.weight" => params.w3 = DMatrix::from_row_slice(OUTPUT, HIDDEN, &values),
            _ => params.b3 = DVector::from_vec(values),
        }
    }
    Ok(params)
}

/// Max relative error between `backward` and central differences with step
/// `h` over the flat parameter indices in `entries`. The denominator is
/// floored at `floor` so that entries with zero gradient compare absolutely.
pub fn gradient_check(
    params: &MlpParams,
    batch: &[&Sample],
    lambda_t: f64,
    entries: &[(usize, usize)],
    h: f64,
    floor: f64,
) -> Result<f64, RegressorError> {
    let (_, grad) = backward(params, batch, lambda_t)?;
    let eval = |p: &MlpParams| -> Result<f64, RegressorError> {
        let preds = predict_batch(p, batch)?;
        Ok(preds.iter().zip(batch).map(|(pr, s)| loss(pr, &s.pose, lambda_t)).sum::<f64>() / batch.len() as f64)
    };
    let mut worst: f64 = 0.0;
    for &(t, i) in entries {
        let mut plus = params.clone();
        plus.tensors_mut()[t][i] += h;
        let mut minus = params.clone();
        minus.tensors_mut()[t][i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let analytic = grad.tensors()[t][i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
