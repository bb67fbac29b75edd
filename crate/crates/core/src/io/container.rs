//! `OPTN` container: a small safetensors-like file.
//!
//! ```text
//! b"OPTN" | version: u32 LE | header_len: u64 LE | JSON header | payload
//! ```
//!
//! The header is padded with spaces so the payload starts on a 64-byte
//! boundary. Every tensor's `byte_offset` is relative to the payload start
//! and a multiple of 64; data is little-endian.

use crate::error::ContainerError;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"OPTN";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

type CResult<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    Cnn,
    /// Calibration batch with optional labels.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub arch: Arch,
    pub dims: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Decoded container, tensors in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arch: Arch,
    pub dims: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(arch: Arch, dims: serde_json::Value) -> Self {
        Self {
            arch,
            dims,
            tensors: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        });
    }

    pub fn push_i32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<i32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::I32(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> CResult<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> CResult<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(ContainerError::BadTensor {
                    name: t.name.clone(),
                    detail: format!("shape {:?} holds {} values", t.shape, t.data.len()),
                });
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                byte_offset: offset as u64,
            });
            offset = align_up(offset + 4 * t.data.len());
        }
        let header = Header {
            arch: self.arch,
            dims: self.dims.clone(),
            tensors: entries,
        };
        let mut json =
            serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        json.resize(align_up(PREAMBLE + json.len()) - PREAMBLE, b' ');

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for (t, e) in self.tensors.iter().zip(&header.tensors) {
            out.resize(payload_start + e.byte_offset as usize, 0);
            match &t.data {
                TensorData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    /// Decodes and validates: magic, version, alignment, bounds, overlap
    /// and finiteness of every `f32` tensor.
    pub fn from_bytes(bytes: &[u8]) -> CResult<Self> {
        if bytes.len() < 4 {
            return Err(ContainerError::Header("file shorter than the magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        if bytes.len() < PREAMBLE {
            return Err(ContainerError::Header("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| ContainerError::OutOfBounds("header".into()))?;
        if header_end % ALIGN != 0 {
            return Err(ContainerError::Misaligned("payload".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if tensors.iter().any(|t: &NamedTensor| t.name == e.name) {
                return Err(ContainerError::Header(format!(
                    "duplicate tensor {}",
                    e.name
                )));
            }
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(ContainerError::BadTensor {
                    name: e.name.clone(),
                    detail: format!("invalid shape {:?}", e.shape),
                });
            }
            let start = e.byte_offset as usize;
            if !start.is_multiple_of(ALIGN) {
                return Err(ContainerError::Misaligned(e.name.clone()));
            }
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ContainerError::OutOfBounds(e.name.clone()))?;
            let end = n
                .checked_mul(4)
                .and_then(|b| b.checked_add(start))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| ContainerError::OutOfBounds(e.name.clone()))?;
            let raw = &payload[start..end];
            let words = raw.chunks_exact(4).map(|c| c.try_into().expect("4 bytes"));
            let data = match e.dtype {
                DType::F32 => {
                    let v: Vec<f32> = words.map(f32::from_le_bytes).collect();
                    if !v.iter().all(|x| x.is_finite()) {
                        return Err(ContainerError::NonFinite(e.name.clone()));
                    }
                    TensorData::F32(v)
                }
                DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
            };
            spans.push((start, end, &e.name));
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(ContainerError::Overlap {
                    first: w[0].2.to_string(),
                    second: w[1].2.to_string(),
                });
            }
        }
        Ok(Self {
            arch: header.arch,
            dims: header.dims,
            tensors,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}
