use super::ModelGraph;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Calibration input: pre-tokenized ids or pre-embedded features.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationBatch {
    Tokens {
        ids: Vec<i32>,
        batch: usize,
        seq_len: usize,
    },
    /// `[B, T, D]` for transformers, `[B, C, H, W]` for CNNs.
    Features(Tensor),
}

pub const DEFAULT_BATCH_SIZE: usize = 32;

impl CalibrationBatch {
    pub fn tokens(ids: Vec<i32>, batch: usize, seq_len: usize) -> Result<Self> {
        if batch == 0 || seq_len == 0 || ids.len() != batch * seq_len {
            return shape_err(format!(
                "token batch [{batch}, {seq_len}] with {} ids",
                ids.len()
            ));
        }
        if ids.iter().any(|&i| i < 0) {
            return Err(Error::Index("negative token id".into()));
        }
        Ok(Self::Tokens {
            ids,
            batch,
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        match self {
            CalibrationBatch::Tokens { batch, .. } => *batch,
            CalibrationBatch::Features(t) => t.shape()[0],
        }
    }

    /// Token length for transformer batches.
    pub fn seq_len(&self) -> usize {
        match self {
            CalibrationBatch::Tokens { seq_len, .. } => *seq_len,
            CalibrationBatch::Features(t) => t.shape()[1],
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.max(1);
        if n >= self.batch_size() {
            return self.clone();
        }
        match self {
            CalibrationBatch::Tokens { ids, seq_len, .. } => CalibrationBatch::Tokens {
                ids: ids[..n * seq_len].to_vec(),
                batch: n,
                seq_len: *seq_len,
            },
            CalibrationBatch::Features(t) => {
                let per = t.numel() / t.shape()[0];
                let mut shape = t.shape().to_vec();
                shape[0] = n;
                CalibrationBatch::Features(
                    Tensor::new(shape, t.data()[..n * per].to_vec()).expect("prefix shape"),
                )
            }
        }
    }

    /// Block-0 input `[B, T, D]`: embedding lookup (or the features as given)
    /// plus positional rows when the model has them.
    pub fn embed(&self, model: &ModelGraph) -> Result<Tensor> {
        let d = model.d_model;
        let t = self.seq_len();
        if let Some(max) = model.max_tokens() {
            if t > max {
                return Err(Error::TokenOverflow(format!(
                    "sequence length {t} exceeds positional table {max}"
                )));
            }
        }
        let mut x = match self {
            CalibrationBatch::Tokens {
                ids,
                batch,
                seq_len,
            } => {
                let emb = model
                    .embedding
                    .as_ref()
                    .ok_or_else(|| Error::Arch("token batch needs an embedding table".into()))?;
                let vocab = emb.shape()[0];
                let mut out = Vec::with_capacity(batch * seq_len * d);
                for &id in ids {
                    let id = id as usize;
                    if id >= vocab {
                        return Err(Error::Index(format!("token id {id} >= vocab {vocab}")));
                    }
                    out.extend_from_slice(&emb.data()[id * d..(id + 1) * d]);
                }
                Tensor::new(vec![*batch, *seq_len, d], out)?
            }
            CalibrationBatch::Features(f) => {
                if f.rank() != 3 || f.shape()[2] != d {
                    return shape_err(format!(
                        "feature batch {:?} does not match d_model {d}",
                        f.shape()
                    ));
                }
                f.clone()
            }
        };
        if let Some(pos) = &model.positions {
            for sample in x.data_mut().chunks_mut(t * d) {
                for (v, p) in sample.iter_mut().zip(&pos.data()[..t * d]) {
                    *v += p;
                }
            }
        }
        Ok(x)
    }
}
