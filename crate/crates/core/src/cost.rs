//! Per-sample FLOPs of a masked encoder.
//!
//! Uses the instrumented forward's convention: a multiply-accumulate is two
//! FLOPs, LayerNorm five per element, residual and pooling adds one. For a
//! block entered by `T` tokens:
//!
//! ```text
//! head_cost(T)   = 2·T·D·d_h·4 + 2·T²·d_h·2
//! neuron_cost(T) = 4·T·D
//! overhead(T)    = 2·5·T·D + 2·T·D
//! ```
//!
//! plus the pooling and classifier tail. The embedding is not counted.

use crate::error::{Error, Result};
use crate::model::{check_token_counts, ModelGraph, Pooling, PruneMask};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dims: Vec<usize>,
    pub n_classes: usize,
    pub pooling: Pooling,
    /// Tokens entering block 0.
    pub seq_len: usize,
    /// Token counts used when a mask carries none.
    pub default_counts: Option<Vec<usize>>,
    baseline: u64,
}

impl CostModel {
    pub fn new(model: &ModelGraph, seq_len: usize) -> Result<Self> {
        Self::from_dims(
            model.d_model,
            model.n_heads,
            model.ffn_dims(),
            model.n_classes(),
            model.pooling,
            seq_len,
            model.token_schedule.clone(),
        )
    }

    pub fn from_dims(
        d_model: usize,
        n_heads: usize,
        ffn_dims: Vec<usize>,
        n_classes: usize,
        pooling: Pooling,
        seq_len: usize,
        default_counts: Option<Vec<usize>>,
    ) -> Result<Self> {
        if d_model == 0 || n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Param(format!(
                "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        if ffn_dims.is_empty() || n_classes == 0 || seq_len == 0 {
            return Err(Error::Param(
                "cost model needs >= 1 block, >= 1 class and >= 1 token".into(),
            ));
        }
        if let Some(c) = &default_counts {
            check_counts(c, ffn_dims.len(), seq_len)?;
        }
        let mut cm = Self {
            d_model,
            n_heads,
            head_dim: d_model / n_heads,
            ffn_dims,
            n_classes,
            pooling,
            seq_len,
            default_counts,
            baseline: 0,
        };
        let heads = vec![n_heads; cm.n_blocks()];
        cm.baseline = cm.flops_counts(&heads, &cm.ffn_dims.clone(), cm.default_counts.as_deref());
        Ok(cm)
    }

    pub fn n_blocks(&self) -> usize {
        self.ffn_dims.len()
    }

    pub fn baseline(&self) -> u64 {
        self.baseline
    }

    pub fn head_cost(&self, t: usize) -> u64 {
        let (t, d, dh) = (t as u64, self.d_model as u64, self.head_dim as u64);
        8 * t * d * dh + 4 * t * t * dh
    }

    pub fn neuron_cost(&self, t: usize) -> u64 {
        4 * (t * self.d_model) as u64
    }

    /// Two LayerNorms and two residual adds.
    pub fn overhead(&self, t: usize) -> u64 {
        12 * (t * self.d_model) as u64
    }

    /// Pooling and classifier, given the tokens leaving the last block.
    pub fn tail(&self, t_last: usize) -> u64 {
        let pool = match self.pooling {
            Pooling::First => 0,
            Pooling::Mean => (t_last * self.d_model) as u64,
        };
        pool + 2 * (self.d_model * self.n_classes) as u64
    }

    /// Tokens entering each block under `counts` (tokens leaving each block).
    pub fn tokens_entering(&self, counts: Option<&[usize]>) -> Vec<usize> {
        let n = self.n_blocks();
        match counts.or(self.default_counts.as_deref()) {
            None => vec![self.seq_len; n],
            Some(c) => std::iter::once(self.seq_len)
                .chain(c[..n - 1].iter().copied())
                .collect(),
        }
    }

    fn tokens_leaving(&self, counts: Option<&[usize]>) -> usize {
        match counts.or(self.default_counts.as_deref()) {
            None => self.seq_len,
            Some(c) => c[self.n_blocks() - 1],
        }
    }

    /// FLOPs from per-block kept head and neuron counts.
    pub fn flops_counts(
        &self,
        heads: &[usize],
        neurons: &[usize],
        counts: Option<&[usize]>,
    ) -> u64 {
        let entering = self.tokens_entering(counts);
        let blocks: u64 = entering
            .iter()
            .zip(heads.iter().zip(neurons))
            .map(|(&t, (&h, &f))| {
                h as u64 * self.head_cost(t) + f as u64 * self.neuron_cost(t) + self.overhead(t)
            })
            .sum();
        blocks + self.tail(self.tokens_leaving(counts))
    }

    fn check_mask(&self, mask: &PruneMask) -> Result<()> {
        if mask.blocks.len() != self.n_blocks() {
            return Err(Error::MaskMismatch(format!(
                "mask has {} blocks, cost model {}",
                mask.blocks.len(),
                self.n_blocks()
            )));
        }
        for (i, (b, &f)) in mask.blocks.iter().zip(&self.ffn_dims).enumerate() {
            if b.heads.len() != self.n_heads || b.neurons.len() != f {
                return Err(Error::MaskMismatch(format!(
                    "block {i}: mask {}x{} vs model {}x{f}",
                    b.heads.len(),
                    b.neurons.len(),
                    self.n_heads
                )));
            }
        }
        if let Some(c) = &mask.token_counts {
            check_counts(c, self.n_blocks(), self.seq_len)?;
        }
        Ok(())
    }

    pub fn flops(&self, mask: &PruneMask) -> Result<u64> {
        self.check_mask(mask)?;
        let heads: Vec<usize> = mask.blocks.iter().map(|b| b.kept_heads().len()).collect();
        let neurons: Vec<usize> = mask.blocks.iter().map(|b| b.kept_neurons().len()).collect();
        Ok(self.flops_counts(&heads, &neurons, mask.token_counts.as_deref()))
    }

    /// Smallest mask the search may emit: one head per block, no neurons.
    pub fn minimal_flops(&self, counts: Option<&[usize]>) -> u64 {
        let n = self.n_blocks();
        self.flops_counts(&vec![1; n], &vec![0; n], counts)
    }

    pub fn ratio(&self, flops: u64) -> f64 {
        flops as f64 / self.baseline as f64
    }
}

fn check_counts(counts: &[usize], n_blocks: usize, seq_len: usize) -> Result<()> {
    check_token_counts(counts, n_blocks)?;
    if counts[0] > seq_len {
        return Err(Error::TokenOverflow(format!(
            "token count {} exceeds sequence length {seq_len}",
            counts[0]
        )));
    }
    Ok(())
}

/// `⌊keep_ratio · baseline⌋`.
pub fn budget_from_ratio(cost: &CostModel, keep_ratio: f64) -> Result<u64> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Param(format!(
            "keep ratio {keep_ratio} outside (0, 1]"
        )));
    }
    Ok((keep_ratio * cost.baseline() as f64).floor() as u64)
}
