//! Seeded random models and batches for demos and tests.

use crate::cnn::{CnnGraph, ConvLayer, PoolKind};
use crate::error::Result;
use crate::model::{Block, CalibrationBatch, LayerNormParams, ModelGraph, Pooling};
use crate::tensor::{Tensor, DEFAULT_LN_EPS};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    /// Positional table length; `None` skips positions.
    pub max_tokens: Option<usize>,
    pub vocab: Option<usize>,
    pub pooling: Pooling,
    /// Log-normal sigma of per-head / per-neuron output scales. Zero gives
    /// homogeneous units; larger values make a few units dominate.
    pub unit_spread: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            d_model: 16,
            n_heads: 4,
            ffn_dim: 32,
            n_classes: 5,
            max_tokens: None,
            vocab: None,
            pooling: Pooling::First,
            unit_spread: 0.8,
        }
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

pub fn toy_model(cfg: &ToyConfig, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let spread = LogNormal::new(0.0, cfg.unit_spread.max(1e-9)).expect("valid sigma");
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for _ in 0..cfg.n_blocks {
        let proj_std = 1.0 / (d as f64).sqrt();
        let wq = normal_tensor(&[d, d], proj_std, &mut rng);
        let wk = normal_tensor(&[d, d], proj_std, &mut rng);
        let wv = normal_tensor(&[d, d], proj_std, &mut rng);
        let mut wo = normal_tensor(&[d, d], proj_std, &mut rng);
        for h in 0..cfg.n_heads {
            let s = spread.sample(&mut rng) as f32;
            for r in h * dh..(h + 1) * dh {
                wo.data_mut()[r * d..(r + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v *= s);
            }
        }
        let w1 = normal_tensor(&[d, cfg.ffn_dim], proj_std, &mut rng);
        let mut w2 = normal_tensor(
            &[cfg.ffn_dim, d],
            1.0 / (cfg.ffn_dim as f64).sqrt(),
            &mut rng,
        );
        for r in 0..cfg.ffn_dim {
            let s = spread.sample(&mut rng) as f32;
            w2.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .for_each(|v| *v *= s);
        }
        let mut ln = || LayerNormParams {
            gamma: Tensor::from_fn(&[d], |_| 1.0 + 0.1 * rng.gen_range(-1.0f32..1.0)),
            beta: Tensor::from_fn(&[d], |_| 0.1 * rng.gen_range(-1.0f32..1.0)),
        };
        let (ln1, ln2) = (ln(), ln());
        blocks.push(Block {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            ln1,
            ln2,
        });
    }
    let classifier = normal_tensor(&[d, cfg.n_classes], 1.0 / (d as f64).sqrt(), &mut rng);
    let embedding = cfg.vocab.map(|v| normal_tensor(&[v, d], 1.0, &mut rng));
    let positions = cfg
        .max_tokens
        .map(|t| normal_tensor(&[t, d], 0.1, &mut rng));
    let model = ModelGraph {
        d_model: d,
        n_heads: cfg.n_heads,
        blocks,
        classifier,
        embedding,
        positions,
        pooling: cfg.pooling,
        ln_eps: DEFAULT_LN_EPS,
        token_schedule: None,
    };
    model.validate()?;
    Ok(model)
}

/// Standard-normal pre-embedded features `[batch, seq_len, D]`.
pub fn toy_feature_batch(
    d_model: usize,
    batch: usize,
    seq_len: usize,
    seed: u64,
) -> CalibrationBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CalibrationBatch::Features(normal_tensor(&[batch, seq_len, d_model], 1.0, &mut rng))
}

pub fn toy_token_batch(
    vocab: usize,
    batch: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..batch * seq_len)
        .map(|_| rng.gen_range(0..vocab as i32))
        .collect();
    CalibrationBatch::tokens(ids, batch, seq_len)
}

#[derive(Debug, Clone)]
pub struct ToyCnnConfig {
    pub in_channels: usize,
    /// Output channels per conv layer.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub n_classes: usize,
    pub unit_spread: f64,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![8, 8, 12],
            kernel: 3,
            n_classes: 5,
            unit_spread: 0.8,
        }
    }
}

pub fn toy_cnn(cfg: &ToyCnnConfig, seed: u64) -> Result<CnnGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = LogNormal::new(0.0, cfg.unit_spread.max(1e-9)).expect("valid sigma");
    let mut layers = Vec::new();
    let mut c_in = cfg.in_channels;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let k = cfg.kernel;
        let weight = normal_tensor(
            &[c_out, c_in, k, k],
            1.0 / ((c_in * k * k) as f64).sqrt(),
            &mut rng,
        );
        let scale = (0..c_out).map(|_| spread.sample(&mut rng) as f32).collect();
        let shift = (0..c_out)
            .map(|_| 0.1 * rng.gen_range(-1.0f32..1.0))
            .collect();
        layers.push(ConvLayer {
            weight,
            scale,
            shift,
            stride: 1,
            pad: k / 2,
            pool: if i + 1 < cfg.channels.len() {
                PoolKind::Max(2)
            } else {
                PoolKind::None
            },
        });
        c_in = c_out;
    }
    let classifier = normal_tensor(&[c_in, cfg.n_classes], 1.0 / (c_in as f64).sqrt(), &mut rng);
    let g = CnnGraph {
        in_channels: cfg.in_channels,
        layers,
        classifier,
    };
    g.validate()?;
    Ok(g)
}

/// Standard-normal images `[batch, C, hw, hw]`.
pub fn toy_image_batch(channels: usize, batch: usize, hw: usize, seed: u64) -> CalibrationBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CalibrationBatch::Features(normal_tensor(&[batch, channels, hw, hw], 1.0, &mut rng))
}
