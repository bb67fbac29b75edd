//! Maskable pre-LN transformer encoder.

mod batch;
mod forward;
mod mask;
pub mod merge;

pub use batch::{CalibrationBatch, DEFAULT_BATCH_SIZE};
pub use forward::{
    forward, forward_counted, forward_from, forward_from_with, forward_with, ActivationTrace,
    ForwardOptions, OpCounter, TokenDrop,
};
pub(crate) use mask::check_token_counts;
pub use mask::{BlockMask, PruneMask, MASK_SCHEMA};
pub use merge::{bipartite_merge, random_prune_tokens, MergePlan, TokenReducer};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Where each block's feature `F_i` is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Block output after the residual add, before the next LayerNorm.
    LNorm,
    /// Output of the block's final dense projection, before the residual add.
    #[default]
    Ffn,
    /// FFN hidden activations after the first projection and GELU.
    ImDense,
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "l_norm" | "lnorm" => Ok(TapPoint::LNorm),
            "ffn" => Ok(TapPoint::Ffn),
            "im_dense" | "imdense" => Ok(TapPoint::ImDense),
            other => Err(Error::Config(format!("unknown tap point {other:?}"))),
        }
    }
}

impl TapPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            TapPoint::LNorm => "l_norm",
            TapPoint::Ffn => "ffn",
            TapPoint::ImDense => "im_dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Classifier reads token 0 (the class token).
    #[default]
    First,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::from_fn(&[d], |_| 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// Weights of one encoder block. Projections are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl Block {
    pub fn ffn_dim(&self) -> usize {
        self.w1.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub d_model: usize,
    pub n_heads: usize,
    pub blocks: Vec<Block>,
    /// `[D, n_classes]`.
    pub classifier: Tensor,
    /// `[vocab, D]`, required for token batches.
    pub embedding: Option<Tensor>,
    /// `[T_max, D]`, added to the block-0 input when present.
    pub positions: Option<Tensor>,
    pub pooling: Pooling,
    pub ln_eps: f32,
    /// Token counts baked in by `prune`; used as the default schedule.
    pub token_schedule: Option<Vec<usize>>,
}

impl ModelGraph {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn ffn_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::ffn_dim).collect()
    }

    pub fn max_tokens(&self) -> Option<usize> {
        self.positions.as_ref().map(|p| p.shape()[0])
    }

    /// Checks every structural invariant and rejects non-finite weights.
    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if self.n_heads == 0 || d == 0 || !d.is_multiple_of(self.n_heads) {
            return shape_err(format!(
                "d_model {d} not divisible by n_heads {}",
                self.n_heads
            ));
        }
        if self.blocks.is_empty() {
            return shape_err("model has no blocks");
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let f = b.ffn_dim();
            let expect: [(&str, &Tensor, Vec<usize>); 10] = [
                ("wq", &b.wq, vec![d, d]),
                ("wk", &b.wk, vec![d, d]),
                ("wv", &b.wv, vec![d, d]),
                ("wo", &b.wo, vec![d, d]),
                ("w1", &b.w1, vec![d, f]),
                ("w2", &b.w2, vec![f, d]),
                ("ln1.gamma", &b.ln1.gamma, vec![d]),
                ("ln1.beta", &b.ln1.beta, vec![d]),
                ("ln2.gamma", &b.ln2.gamma, vec![d]),
                ("ln2.beta", &b.ln2.beta, vec![d]),
            ];
            for (name, t, shape) in expect {
                if t.shape() != shape.as_slice() {
                    return shape_err(format!(
                        "block {i} {name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    ));
                }
                if !t.is_finite() {
                    return Err(Error::Param(format!(
                        "block {i} {name} has non-finite weights"
                    )));
                }
            }
        }
        if self.classifier.rank() != 2 || self.classifier.shape()[0] != d {
            return shape_err(format!("classifier shape {:?}", self.classifier.shape()));
        }
        if !self.classifier.is_finite() {
            return Err(Error::Param("classifier has non-finite weights".into()));
        }
        for (name, t) in [
            ("embedding", &self.embedding),
            ("positions", &self.positions),
        ] {
            if let Some(t) = t {
                if t.rank() != 2 || t.shape()[1] != d {
                    return shape_err(format!("{name} shape {:?}", t.shape()));
                }
                if !t.is_finite() {
                    return Err(Error::Param(format!("{name} has non-finite weights")));
                }
            }
        }
        if let Some(s) = &self.token_schedule {
            mask::check_token_counts(s, self.n_blocks())?;
        }
        Ok(())
    }
}
