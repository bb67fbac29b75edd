//! Masked forward pass with per-block feature taps.
//!
//! Masked heads and neurons are skipped outright, which is exactly
//! equivalent to zeroing their weight slices: a head's concatenated output
//! slice (the matching `Wo` rows) never reaches the residual stream, and a
//! neuron's `W1` column and `W2` row drop out together.

use super::merge::{MergePlan, TokenReducer};
use super::{Block, BlockMask, CalibrationBatch, ModelGraph, Pooling, PruneMask, TapPoint};
use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm_rows, softmax_row_f64, Tensor};

/// Operation tally from an instrumented forward.
///
/// FLOPs are `2·macs + 5·norm_elems + add_elems`: a multiply-accumulate is
/// two FLOPs, a LayerNorm costs five per element, a residual/pool add one.
/// Softmax, GELU and token merging are not tallied.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter {
    pub macs: u64,
    pub norm_elems: u64,
    pub add_elems: u64,
}

impl OpCounter {
    pub fn flops(&self) -> u64 {
        2 * self.macs + 5 * self.norm_elems + self.add_elems
    }
}

/// Zero one token's residual vector after `after_block` and every later block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenDrop {
    pub after_block: usize,
    pub token: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub tap: TapPoint,
    pub reducer: TokenReducer,
    pub token_drop: Option<TokenDrop>,
}

impl ForwardOptions {
    pub fn with_tap(tap: TapPoint) -> Self {
        Self {
            tap,
            ..Self::default()
        }
    }
}

/// Per-block features and logits for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `F_i`, one per block: `[B, T_i, D]` (`[B, T_i, d_f]` for the IM-dense tap).
    pub features: Vec<Tensor>,
    /// `[B, n_classes]`.
    pub logits: Tensor,
    /// Residual stream entering each block; the last entry is the final output.
    pub hidden: Vec<Tensor>,
    /// Tokens alive after each block.
    pub token_counts: Vec<usize>,
    pub tap: TapPoint,
}

pub fn forward(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    tap: TapPoint,
) -> Result<ActivationTrace> {
    forward_with(model, batch, mask, &ForwardOptions::with_tap(tap))
}

pub fn forward_with(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    opts: &ForwardOptions,
) -> Result<ActivationTrace> {
    let mut counter = OpCounter::default();
    run_from_embedding(model, batch, mask, opts, &mut counter)
}

/// Forward pass that also returns the executed operation tally.
pub fn forward_counted(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    tap: TapPoint,
) -> Result<(ActivationTrace, OpCounter)> {
    let mut counter = OpCounter::default();
    let trace = run_from_embedding(
        model,
        batch,
        mask,
        &ForwardOptions::with_tap(tap),
        &mut counter,
    )?;
    Ok((trace, counter))
}

fn run_from_embedding(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    opts: &ForwardOptions,
    counter: &mut OpCounter,
) -> Result<ActivationTrace> {
    mask.check(model)?;
    let x = batch.embed(model)?;
    run_blocks(
        model,
        mask,
        opts,
        0,
        x,
        Vec::new(),
        Vec::new(),
        Vec::new(),
        counter,
    )
}

/// Re-runs blocks `start..` from the cached residual stream of a full-mask trace.
pub fn forward_from(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    tap: TapPoint,
    start_block: usize,
    cached: &ActivationTrace,
) -> Result<ActivationTrace> {
    forward_from_with(
        model,
        batch,
        mask,
        &ForwardOptions::with_tap(tap),
        start_block,
        cached,
    )
}

pub fn forward_from_with(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    mask: &PruneMask,
    opts: &ForwardOptions,
    start_block: usize,
    cached: &ActivationTrace,
) -> Result<ActivationTrace> {
    mask.check(model)?;
    let n = model.n_blocks();
    if cached.features.len() != n || cached.hidden.len() != n + 1 {
        return Err(Error::CacheMismatch(format!(
            "cache has {} features / {} hidden states for {n} blocks",
            cached.features.len(),
            cached.hidden.len()
        )));
    }
    if cached.tap != opts.tap {
        return Err(Error::CacheMismatch(format!(
            "cache tapped at {}, requested {}",
            cached.tap.as_str(),
            opts.tap.as_str()
        )));
    }
    if start_block > n {
        return Err(Error::Index(format!("start block {start_block} > {n}")));
    }
    let cached_in = &cached.hidden[0];
    if cached_in.shape()[0] != batch.batch_size() || cached_in.shape()[1] != batch.seq_len() {
        return Err(Error::CacheMismatch(format!(
            "cache built for [{}, {}], batch is [{}, {}]",
            cached_in.shape()[0],
            cached_in.shape()[1],
            batch.batch_size(),
            batch.seq_len()
        )));
    }
    if let Some(i) = mask.blocks[..start_block].iter().position(|b| !b.is_full()) {
        return Err(Error::CacheMismatch(format!(
            "mask prunes block {i}, before start block {start_block}"
        )));
    }
    let counts = effective_counts(mask, batch.seq_len(), n);
    if counts[..start_block] != cached.token_counts[..start_block] {
        return Err(Error::CacheMismatch(
            "token schedule differs from cache".into(),
        ));
    }
    let mut counter = OpCounter::default();
    run_blocks(
        model,
        mask,
        opts,
        start_block,
        cached.hidden[start_block].clone(),
        cached.features[..start_block].to_vec(),
        cached.hidden[..start_block].to_vec(),
        cached.token_counts[..start_block].to_vec(),
        &mut counter,
    )
}

fn effective_counts(mask: &PruneMask, seq_len: usize, n: usize) -> Vec<usize> {
    match &mask.token_counts {
        Some(c) => c.clone(),
        None => vec![seq_len; n],
    }
}

#[allow(clippy::too_many_arguments)]
fn run_blocks(
    model: &ModelGraph,
    mask: &PruneMask,
    opts: &ForwardOptions,
    start: usize,
    mut x: Tensor,
    mut features: Vec<Tensor>,
    mut hidden: Vec<Tensor>,
    mut token_counts: Vec<usize>,
    counter: &mut OpCounter,
) -> Result<ActivationTrace> {
    let d = model.d_model;
    let b = x.shape()[0];
    if let Some(drop) = opts.token_drop {
        if mask.token_counts.is_some() {
            return Err(Error::Param(
                "token drop cannot be combined with a token schedule".into(),
            ));
        }
        if drop.token >= x.shape()[1] {
            return Err(Error::Index(format!("token {} out of range", drop.token)));
        }
        if drop.after_block < start {
            zero_token(&mut x, drop.token);
        }
    }
    for (z, block) in model.blocks.iter().enumerate().skip(start) {
        let t = x.shape()[1];
        let bm = &mask.blocks[z];
        let width = match opts.tap {
            TapPoint::ImDense => block.ffn_dim(),
            _ => d,
        };
        let mut out = Vec::with_capacity(b * t * d);
        let mut tap = Vec::with_capacity(b * t * width);
        for sample in x.data().chunks(t * d) {
            let (o, f) = block_sample(model, block, bm, sample, t, opts.tap, counter);
            out.extend(o);
            tap.extend(f);
        }
        let mut out = Tensor::new(vec![b, t, d], out)?;
        let mut tap = Tensor::new(vec![b, t, width], tap)?;
        if let Some(drop) = opts.token_drop {
            if z >= drop.after_block {
                zero_token(&mut out, drop.token);
            }
        }
        if let Some(counts) = &mask.token_counts {
            let target = counts[z];
            if target > t {
                return Err(Error::TokenOverflow(format!(
                    "block {z}: schedule asks for {target} tokens, only {t} alive"
                )));
            }
            if target < t {
                let mut merged = Vec::with_capacity(b * target * d);
                let mut merged_tap = Vec::with_capacity(b * target * width);
                for (s, (xs, fs)) in out
                    .data()
                    .chunks(t * d)
                    .zip(tap.data().chunks(t * width))
                    .enumerate()
                {
                    let stream = (z * b + s) as u64;
                    let plan: MergePlan = opts.reducer.reduce(xs, t, d, target, stream)?;
                    merged.extend(plan.apply(xs, d));
                    merged_tap.extend(plan.apply(fs, width));
                }
                out = Tensor::new(vec![b, target, d], merged)?;
                tap = Tensor::new(vec![b, target, width], merged_tap)?;
            }
        }
        hidden.push(x);
        features.push(tap);
        token_counts.push(out.shape()[1]);
        x = out;
    }
    let logits = classify(model, &x, counter)?;
    hidden.push(x);
    Ok(ActivationTrace {
        features,
        logits,
        hidden,
        token_counts,
        tap: opts.tap,
    })
}

fn zero_token(x: &mut Tensor, token: usize) {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    for sample in x.data_mut().chunks_mut(t * d) {
        sample[token * d..(token + 1) * d].fill(0.0);
    }
}

fn classify(model: &ModelGraph, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c = model.n_classes();
    let mut logits = Vec::with_capacity(b * c);
    for sample in x.data().chunks(t * d) {
        let pooled: Vec<f32> = match model.pooling {
            Pooling::First => sample[..d].to_vec(),
            Pooling::Mean => {
                counter.add_elems += (t * d) as u64;
                let mut acc = vec![0.0f64; d];
                for row in sample.chunks(d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                acc.into_iter().map(|a| (a / t as f64) as f32).collect()
            }
        };
        let mut acc = vec![0.0f64; c];
        mm_rows_acc(
            &pooled,
            1,
            d,
            model.classifier.data(),
            c,
            0,
            &mut acc,
            counter,
        );
        logits.extend(acc.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![b, c], logits)
}

/// One block on one `[t, D]` sample. Returns (block output, tap feature).
fn block_sample(
    model: &ModelGraph,
    block: &Block,
    bm: &BlockMask,
    x: &[f32],
    t: usize,
    tap: TapPoint,
    counter: &mut OpCounter,
) -> (Vec<f32>, Vec<f32>) {
    let d = model.d_model;
    let dh = model.head_dim();
    let eps = model.ln_eps;

    let mut h = vec![0.0f32; t * d];
    layer_norm_rows(
        x,
        d,
        block.ln1.gamma.data(),
        block.ln1.beta.data(),
        eps,
        &mut h,
    );
    counter.norm_elems += (t * d) as u64;

    let mut attn = vec![0.0f64; t * d];
    let scale = 1.0 / (dh as f64).sqrt();
    for head in bm.kept_heads() {
        let off = head * dh;
        let q = mm_cols(&h, t, d, block.wq.data(), d, off, dh, counter);
        let k = mm_cols(&h, t, d, block.wk.data(), d, off, dh, counter);
        let v = mm_cols(&h, t, d, block.wv.data(), d, off, dh, counter);
        let mut o = vec![0.0f32; t * dh];
        let mut scores = vec![0.0f32; t];
        for i in 0..t {
            let qi = &q[i * dh..(i + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[j * dh..(j + 1) * dh];
                let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                *s = (dot * scale) as f32;
            }
            let p = softmax_row_f64(&scores, 1.0);
            let mut acc = vec![0.0f64; dh];
            for (j, &pj) in p.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                    *a += pj * vv as f64;
                }
            }
            for (dst, a) in o[i * dh..(i + 1) * dh].iter_mut().zip(acc) {
                *dst = a as f32;
            }
        }
        counter.macs += 2 * (t * t * dh) as u64;
        mm_rows_acc(&o, t, dh, block.wo.data(), d, off, &mut attn, counter);
    }
    let x1: Vec<f32> = x.iter().zip(&attn).map(|(&a, &b)| a + b as f32).collect();
    counter.add_elems += (t * d) as u64;

    let mut h2 = vec![0.0f32; t * d];
    layer_norm_rows(
        &x1,
        d,
        block.ln2.gamma.data(),
        block.ln2.beta.data(),
        eps,
        &mut h2,
    );
    counter.norm_elems += (t * d) as u64;

    let kept = bm.kept_neurons();
    let f = block.ffn_dim();
    let mut u = mm_gather_cols(&h2, t, d, block.w1.data(), f, &kept, counter);
    u.iter_mut().for_each(|v| *v = gelu(*v));
    let mut y_acc = vec![0.0f64; t * d];
    mm_gather_rows_acc(&u, t, &kept, block.w2.data(), d, &mut y_acc, counter);
    let y: Vec<f32> = y_acc.into_iter().map(|v| v as f32).collect();
    let x2: Vec<f32> = x1.iter().zip(&y).map(|(&a, &b)| a + b).collect();
    counter.add_elems += (t * d) as u64;

    let feat = match tap {
        TapPoint::Ffn => y,
        TapPoint::LNorm => x2.clone(),
        TapPoint::ImDense => {
            let mut full = vec![0.0f32; t * f];
            for r in 0..t {
                for (c, &j) in kept.iter().enumerate() {
                    full[r * f + j] = u[r * kept.len() + c];
                }
            }
            full
        }
    };
    (x2, feat)
}

/// `a[m,k] · w[:, off..off+n]` where `w` is `[k, w_cols]`.
#[allow(clippy::too_many_arguments)]
fn mm_cols(
    a: &[f32],
    m: usize,
    k: usize,
    w: &[f32],
    w_cols: usize,
    off: usize,
    n: usize,
    counter: &mut OpCounter,
) -> Vec<f32> {
    counter.macs += (m * k * n) as u64;
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for r in 0..m {
        acc.fill(0.0);
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            let wrow = &w[kk * w_cols + off..kk * w_cols + off + n];
            for (s, &wv) in acc.iter_mut().zip(wrow) {
                *s += av as f64 * wv as f64;
            }
        }
        for (o, s) in out[r * n..(r + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `acc[m, w_cols] += a[m,k] · w[off..off+k, :]`.
#[allow(clippy::too_many_arguments)]
fn mm_rows_acc(
    a: &[f32],
    m: usize,
    k: usize,
    w: &[f32],
    w_cols: usize,
    off: usize,
    acc: &mut [f64],
    counter: &mut OpCounter,
) {
    counter.macs += (m * k * w_cols) as u64;
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let out = &mut acc[r * w_cols..(r + 1) * w_cols];
        for (kk, &av) in arow.iter().enumerate() {
            let wrow = &w[(off + kk) * w_cols..(off + kk + 1) * w_cols];
            for (s, &wv) in out.iter_mut().zip(wrow) {
                *s += av as f64 * wv as f64;
            }
        }
    }
}

/// `a[m,k] · w[:, cols]` for `w` of shape `[k, w_cols]`.
fn mm_gather_cols(
    a: &[f32],
    m: usize,
    k: usize,
    w: &[f32],
    w_cols: usize,
    cols: &[usize],
    counter: &mut OpCounter,
) -> Vec<f32> {
    let n = cols.len();
    counter.macs += (m * k * n) as u64;
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for r in 0..m {
        acc.fill(0.0);
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            let wrow = &w[kk * w_cols..(kk + 1) * w_cols];
            for (s, &c) in acc.iter_mut().zip(cols) {
                *s += av as f64 * wrow[c] as f64;
            }
        }
        for (o, s) in out[r * n..(r + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `acc[m, w_cols] += a[m, |rows|] · w[rows, :]`.
fn mm_gather_rows_acc(
    a: &[f32],
    m: usize,
    rows: &[usize],
    w: &[f32],
    w_cols: usize,
    acc: &mut [f64],
    counter: &mut OpCounter,
) {
    let k = rows.len();
    counter.macs += (m * k * w_cols) as u64;
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let out = &mut acc[r * w_cols..(r + 1) * w_cols];
        for (&av, &src) in arow.iter().zip(rows) {
            let wrow = &w[src * w_cols..(src + 1) * w_cols];
            for (s, &wv) in out.iter_mut().zip(wrow) {
                *s += av as f64 * wv as f64;
            }
        }
    }
}
