//! VFMT binary tensor files and their JSON sidecars.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"VFMT" | version: u32 = 1 | dtype: u32 = 1 (f32) | rank: u32 | dims: rank × u64 | payload: f32 × Π dims
//! ```
//!
//! The payload is row-major. Metadata lives next to the tensor in
//! `<stem>.meta.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"VFMT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum VfmtError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic {found:?}, expected \"VFMT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported VFMT version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0} (only 1 = f32)")]
    UnsupportedDtype(u32),
    #[error("length mismatch: header implies {expected} bytes, file has {found}")]
    LengthMismatch { expected: u64, found: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape {dims:?} does not match {len} values")]
    Shape { dims: Vec<usize>, len: usize },
    #[error("{path}: bad sidecar: {reason}")]
    Meta { path: PathBuf, reason: String },
}

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, VfmtError> {
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len()) {
            return Err(VfmtError::Shape { dims, len: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VfmtError::NonFinite { index });
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self, VfmtError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, VfmtError> {
    let found = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(VfmtError::LengthMismatch { expected: HEADER_LEN as u64, found });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(VfmtError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(VfmtError::LengthMismatch { expected: HEADER_LEN as u64, found });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(VfmtError::UnsupportedVersion(version));
    }
    let dtype = read_u32(bytes, 8);
    if dtype != DTYPE_F32 {
        return Err(VfmtError::UnsupportedDtype(dtype));
    }
    let rank = read_u32(bytes, 12) as u64;
    let dims_end = HEADER_LEN as u64 + 8 * rank;
    if found < dims_end {
        return Err(VfmtError::LengthMismatch { expected: dims_end, found });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for i in 0..rank as usize {
        let at = HEADER_LEN + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        count = count.saturating_mul(d);
        dims.push(d);
    }
    let expected = count.saturating_mul(4).saturating_add(dims_end);
    if expected != found {
        return Err(VfmtError::LengthMismatch { expected, found });
    }
    let data: Vec<f32> =
        bytes[dims_end as usize..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    Tensor::new(dims.into_iter().map(|d| d as usize).collect(), data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor, VfmtError> {
    let bytes = fs::read(path).map_err(|source| VfmtError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), VfmtError> {
    fs::write(path, encode(t)).map_err(|source| VfmtError::Io { path: path.to_path_buf(), source })
}

/// `dir/features.vfmt` → `dir/features.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn read_sidecar<M: DeserializeOwned>(tensor_path: &Path) -> Result<M, VfmtError> {
    let path = sidecar_path(tensor_path);
    let text = fs::read_to_string(&path).map_err(|source| VfmtError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| VfmtError::Meta { path, reason: e.to_string() })
}

pub fn write_sidecar<M: Serialize>(tensor_path: &Path, meta: &M) -> Result<(), VfmtError> {
    let path = sidecar_path(tensor_path);
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| VfmtError::Meta { path: path.clone(), reason: e.to_string() })?;
    text.push('\n');
    fs::write(&path, text).map_err(|source| VfmtError::Io { path, source })
}
