//! Independent 64-bit reference implementations.
//!
//! Masks are applied by zeroing weights, heads are computed from the full
//! concatenated projections, and Gram matrices are materialized, so none of
//! the engine's skip-and-gather or identity shortcuts are shared.

#![allow(dead_code)]

use trajprune::model::{CalibrationBatch, ModelGraph, Pooling, PruneMask, TapPoint};
use trajprune::tensor::Tensor;

pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            rows: s[0],
            cols: s[1],
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }
}

fn matmul(a: &[f64], m: usize, k: usize, b: &Mat) -> Vec<f64> {
    assert_eq!(k, b.rows);
    let mut out = vec![0.0; m * b.cols];
    for i in 0..m {
        for j in 0..b.cols {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b.at(p, j);
            }
            out[i * b.cols + j] = s;
        }
    }
    out
}

fn layer_norm(x: &[f64], d: usize, g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * g.data()[j] as f64 + b.data()[j] as f64);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Copy of `model` in f64 with masked units' weights set to zero.
pub struct ZeroedBlock {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w1: Mat,
    w2: Mat,
}

pub fn zeroed_blocks(model: &ModelGraph, mask: &PruneMask) -> Vec<ZeroedBlock> {
    let d = model.d_model;
    let dh = model.head_dim();
    model
        .blocks
        .iter()
        .zip(&mask.blocks)
        .map(|(b, bm)| {
            let mut z = ZeroedBlock {
                wq: Mat::from_tensor(&b.wq),
                wk: Mat::from_tensor(&b.wk),
                wv: Mat::from_tensor(&b.wv),
                wo: Mat::from_tensor(&b.wo),
                w1: Mat::from_tensor(&b.w1),
                w2: Mat::from_tensor(&b.w2),
            };
            for h in 0..model.n_heads {
                if bm.heads[h] {
                    continue;
                }
                for r in 0..d {
                    for c in h * dh..(h + 1) * dh {
                        z.wq.v[r * d + c] = 0.0;
                        z.wk.v[r * d + c] = 0.0;
                        z.wv.v[r * d + c] = 0.0;
                        z.wo.v[c * d + r] = 0.0;
                    }
                }
            }
            let f = b.ffn_dim();
            for j in 0..f {
                if bm.neurons[j] {
                    continue;
                }
                for r in 0..d {
                    z.w1.v[r * f + j] = 0.0;
                    z.w2.v[j * d + r] = 0.0;
                }
            }
            z
        })
        .collect()
}

pub struct OracleTrace {
    /// Flattened `[B, T, W]` per block.
    pub features: Vec<Vec<f64>>,
    pub widths: Vec<usize>,
    /// `[B, C]`.
    pub logits: Vec<f64>,
}

pub fn batch_input(model: &ModelGraph, batch: &CalibrationBatch) -> (Vec<f64>, usize, usize) {
    let d = model.d_model;
    let (b, t) = (batch.batch_size(), batch.seq_len());
    let mut x = vec![0.0; b * t * d];
    match batch {
        CalibrationBatch::Features(f) => {
            for (dst, &v) in x.iter_mut().zip(f.data()) {
                *dst = v as f64;
            }
        }
        CalibrationBatch::Tokens { ids, .. } => {
            let e = model.embedding.as_ref().expect("embedding");
            for (k, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    x[k * d + j] = e.data()[id as usize * d + j] as f64;
                }
            }
        }
    }
    if let Some(p) = &model.positions {
        for s in 0..b {
            for i in 0..t {
                for j in 0..d {
                    x[(s * t + i) * d + j] += p.data()[i * d + j] as f64;
                }
            }
        }
    }
    (x, b, t)
}

/// Full-length forward (no token reduction) with zeroed weights.
pub fn oracle_forward(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    tap: TapPoint,
) -> OracleTrace {
    let d = model.d_model;
    let dh = model.head_dim();
    let eps = model.ln_eps as f64;
    let blocks = zeroed_blocks(model, mask);
    let (mut x, b, t) = batch_input(model, batch);
    let mut features = Vec::new();
    let mut widths = Vec::new();
    for (blk, z) in model.blocks.iter().zip(&blocks) {
        let f = blk.ffn_dim();
        let mut feat = Vec::new();
        let mut next = Vec::with_capacity(x.len());
        for s in 0..b {
            let xs = &x[s * t * d..(s + 1) * t * d];
            let h = layer_norm(xs, d, &blk.ln1.gamma, &blk.ln1.beta, eps);
            let q = matmul(&h, t, d, &z.wq);
            let k = matmul(&h, t, d, &z.wk);
            let v = matmul(&h, t, d, &z.wv);
            let mut concat = vec![0.0; t * d];
            for head in 0..model.n_heads {
                let off = head * dh;
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q[i * d + off + c] * k[j * d + off + c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let p = softmax(&scores);
                    for c in 0..dh {
                        concat[i * d + off + c] = (0..t).map(|j| p[j] * v[j * d + off + c]).sum();
                    }
                }
            }
            let attn = matmul(&concat, t, d, &z.wo);
            let x1: Vec<f64> = xs.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let h2 = layer_norm(&x1, d, &blk.ln2.gamma, &blk.ln2.beta, eps);
            let u: Vec<f64> = matmul(&h2, t, d, &z.w1).into_iter().map(gelu).collect();
            let y = matmul(&u, t, f, &z.w2);
            let x2: Vec<f64> = x1.iter().zip(&y).map(|(a, b)| a + b).collect();
            match tap {
                TapPoint::Ffn => feat.extend_from_slice(&y),
                TapPoint::LNorm => feat.extend_from_slice(&x2),
                TapPoint::ImDense => feat.extend_from_slice(&u),
            }
            next.extend(x2);
        }
        widths.push(if tap == TapPoint::ImDense { f } else { d });
        features.push(feat);
        x = next;
    }
    let cls = Mat::from_tensor(&model.classifier);
    let mut logits = Vec::new();
    for s in 0..b {
        let xs = &x[s * t * d..(s + 1) * t * d];
        let pooled: Vec<f64> = match model.pooling {
            Pooling::First => xs[..d].to_vec(),
            Pooling::Mean => (0..d)
                .map(|j| (0..t).map(|i| xs[i * d + j]).sum::<f64>() / t as f64)
                .collect(),
        };
        logits.extend(matmul(&pooled, 1, d, &cls));
    }
    OracleTrace {
        features,
        widths,
        logits,
    }
}

/// `‖ψ(F')ψ(F')ᵀ − ψ(F)ψ(F)ᵀ‖²_F` with both Gram matrices materialized.
pub fn materialized_gram_diff(fp: &[f64], f: &[f64], width: usize) -> f64 {
    let n = f.len() / width;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot = |x: &[f64]| -> f64 {
                (0..width)
                    .map(|c| x[i * width + c] * x[j * width + c])
                    .sum()
            };
            let diff = dot(fp) - dot(f);
            total += diff * diff;
        }
    }
    total
}

/// `T² · mean_b Σ_c p log(p / q)` on tempered softmaxes.
pub fn kd(base: &[f64], masked: &[f64], classes: usize, temperature: f64) -> f64 {
    let mut total = 0.0;
    let rows = base.len() / classes;
    for r in 0..rows {
        let scale = |row: &[f64]| row.iter().map(|v| v / temperature).collect::<Vec<_>>();
        let p = softmax(&scale(&base[r * classes..(r + 1) * classes]));
        let q = softmax(&scale(&masked[r * classes..(r + 1) * classes]));
        total += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    temperature * temperature * total / rows as f64
}

/// Unit importance by full re-evaluation: every downstream block in
/// `range` plus λ-weighted KD.
pub fn oracle_importance(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    masked: &PruneMask,
    layers: std::ops::Range<usize>,
    tap: TapPoint,
    lambda: f64,
    temperature: f64,
) -> f64 {
    let base = oracle_forward(model, batch, &PruneMask::full(model), tap);
    let pert = oracle_forward(model, batch, masked, tap);
    let md: f64 = layers
        .map(|z| materialized_gram_diff(&pert.features[z], &base.features[z], base.widths[z]))
        .sum();
    md + lambda * kd(&base.logits, &pert.logits, model.n_classes(), temperature)
}

pub fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

use trajprune::cost::CostModel;
use trajprune::importance::{ImportanceTable, ScoreConfig, TABLE_SCHEMA};

pub fn table_from_scores(
    heads: Vec<Vec<f64>>,
    neurons: Vec<Vec<f64>>,
    seq_len: usize,
) -> ImportanceTable {
    ImportanceTable {
        schema: TABLE_SCHEMA.into(),
        seq_len,
        config: ScoreConfig::default(),
        head_scores: heads,
        neuron_scores: neurons,
        token_scores: None,
        channel_scores: None,
        input_hw: None,
        diagnostics: None,
    }
}

/// Synthetic search instance: uniform scores on a `blocks x heads x neurons` grid.
pub fn random_instance(
    rng: &mut impl rand::Rng,
    blocks: usize,
    heads: usize,
    neurons: usize,
    seq_len: usize,
) -> (ImportanceTable, CostModel) {
    let table = table_from_scores(
        (0..blocks)
            .map(|_| (0..heads).map(|_| rng.gen::<f64>()).collect())
            .collect(),
        (0..blocks)
            .map(|_| (0..neurons).map(|_| rng.gen::<f64>()).collect())
            .collect(),
        seq_len,
    );
    let cost = CostModel::from_dims(
        4 * heads,
        heads,
        vec![neurons; blocks],
        3,
        Pooling::First,
        seq_len,
        None,
    )
    .expect("valid dims");
    (table, cost)
}

/// Random mask with at least one head per block.
pub fn random_mask(model: &ModelGraph, rng: &mut impl rand::Rng, keep: f64) -> PruneMask {
    let mut mask = PruneMask::full(model);
    for b in &mut mask.blocks {
        for h in b.heads.iter_mut() {
            *h = rng.gen::<f64>() < keep;
        }
        if !b.heads.iter().any(|&h| h) {
            let i = rng.gen_range(0..b.heads.len());
            b.heads[i] = true;
        }
        for n in b.neurons.iter_mut() {
            *n = rng.gen::<f64>() < keep;
        }
    }
    mask
}
