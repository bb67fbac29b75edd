//! Trajectory importance.
//!
//! A unit's score is the feature-manifold distance its removal induces in
//! downstream blocks plus a λ-weighted, temperature-scaled KL divergence
//! between the original and masked logits:
//!
//! ```text
//! I(i, j) = Σ_{z in range(i)} ‖M(F'_z) − M(F_z)‖²_F + λ · T² · KL(p_T ‖ p'_T)
//! ```
//!
//! with `M(F) = ψ(F)ψ(F)ᵀ` over the `[B·T, D]` flattening. Tokens use a
//! per-position inter-sample map and CNN channels a batch-summed squared
//! error instead of `M`.

use crate::cnn::{cnn_forward, cnn_forward_from, ChannelMask, CnnGraph};
use crate::error::{shape_err, Error, Result};
use crate::model::{
    forward, forward_from, CalibrationBatch, ForwardOptions, ModelGraph, PruneMask, TapPoint,
    TokenDrop, DEFAULT_BATCH_SIZE,
};
use crate::tensor::{gram_diff_sq, gram_diff_sq_rows, log_softmax_row_f64, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::str::FromStr;

/// Environment variable holding the scoring worker count.
pub const WORKERS_ENV: &str = "TRAJPRUNE_WORKERS";

/// Score given to the class token so it is never scheduled out.
pub const CLASS_TOKEN_SCORE: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    /// Divides by the number of accumulated layers.
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Which block features accumulate the manifold term, relative to the
/// masked block `i` of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrajectoryRange {
    #[serde(rename = "i")]
    Current,
    #[serde(rename = "i+1")]
    Next,
    #[serde(rename = "i..N")]
    CurrentToEnd,
    #[default]
    #[serde(rename = "i+1..N")]
    NextToEnd,
}

impl TrajectoryRange {
    /// Block indices (0-based) accumulated for a unit in block `i`.
    pub fn layers(self, i: usize, n_blocks: usize) -> Range<usize> {
        let (lo, hi) = match self {
            TrajectoryRange::Current => (i, i + 1),
            TrajectoryRange::Next => (i + 1, i + 2),
            TrajectoryRange::CurrentToEnd => (i, n_blocks),
            TrajectoryRange::NextToEnd => (i + 1, n_blocks),
        };
        lo.min(n_blocks)..hi.min(n_blocks)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryRange::Current => "i",
            TrajectoryRange::Next => "i+1",
            TrajectoryRange::CurrentToEnd => "i..N",
            TrajectoryRange::NextToEnd => "i+1..N",
        }
    }
}

impl FromStr for TrajectoryRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").to_ascii_lowercase().as_str() {
            "i" | "[i]" => Ok(TrajectoryRange::Current),
            "i+1" | "[i+1]" => Ok(TrajectoryRange::Next),
            "i..n" | "[i,n]" | "i,n" => Ok(TrajectoryRange::CurrentToEnd),
            "i+1..n" | "[i+1,n]" | "i+1,n" => Ok(TrajectoryRange::NextToEnd),
            other => Err(Error::Config(format!("unknown trajectory depth {other:?}"))),
        }
    }
}

/// Task family; selects the default λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Language,
    Vision,
}

impl Task {
    pub fn default_lambda(self) -> f64 {
        match self {
            Task::Language => 0.1,
            Task::Vision => 0.01,
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "language" | "nlp" => Ok(Task::Language),
            "vision" | "image" => Ok(Task::Vision),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub aggregation: Aggregation,
    pub range: TrajectoryRange,
    pub tap: TapPoint,
    pub batch_size: usize,
}

impl ScoreConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            lambda: task.default_lambda(),
            temperature: 4.0,
            aggregation: Aggregation::Sum,
            range: TrajectoryRange::NextToEnd,
            tap: TapPoint::Ffn,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Param(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Param(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self::for_task(Task::Language)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Head,
    Neuron,
}

/// The two terms of a unit's score before λ weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreParts {
    pub manifold: f64,
    pub logit_kd: f64,
}

impl ScoreParts {
    pub fn total(&self, lambda: f64) -> f64 {
        let v = self.manifold + lambda * self.logit_kd;
        if v.is_finite() {
            v.max(0.0)
        } else {
            f64::MAX
        }
    }
}

/// Mean score terms over all scored units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    pub mean_manifold: f64,
    pub mean_logit_kd: f64,
}

impl ScoreDiagnostics {
    /// The manifold term should sit one to two orders of magnitude above the
    /// λ-weighted logit term. Returns a message when it does not.
    pub fn magnitude_warning(&self, lambda: f64) -> Option<String> {
        let kd = lambda * self.mean_logit_kd;
        if lambda == 0.0 || kd <= 0.0 || self.mean_manifold <= 0.0 {
            return None;
        }
        let gap = self.mean_manifold.log10().floor() - kd.log10().floor();
        (!(1.0..=2.0).contains(&gap)).then(|| {
            format!(
                "manifold term ({:.3e}) vs lambda-weighted logit term ({kd:.3e}) differ by \
                 {gap} orders of magnitude; expected 1-2, consider retuning lambda",
                self.mean_manifold
            )
        })
    }
}

pub const TABLE_SCHEMA: &str = "trajprune.importance/v1";

/// Importance of every prunable unit. All entries are finite and `>= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub schema: String,
    /// Calibration sequence length the scores were computed at.
    pub seq_len: usize,
    pub config: ScoreConfig,
    /// `[block][head]`.
    pub head_scores: Vec<Vec<f64>>,
    /// `[block][neuron]`.
    pub neuron_scores: Vec<Vec<f64>>,
    /// `[block][token]`, token 0 pinned at [`CLASS_TOKEN_SCORE`].
    pub token_scores: Option<Vec<Vec<f64>>>,
    /// `[conv layer][output channel]`.
    pub channel_scores: Option<Vec<Vec<f64>>>,
    /// Image `[H, W]` for channel tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hw: Option<[usize; 2]>,
    pub diagnostics: Option<ScoreDiagnostics>,
}

impl ImportanceTable {
    pub fn total_head_neuron(&self) -> f64 {
        self.head_scores
            .iter()
            .chain(&self.neuron_scores)
            .flatten()
            .sum()
    }

    pub fn check(&self) -> Result<()> {
        let all = self
            .head_scores
            .iter()
            .chain(&self.neuron_scores)
            .chain(self.token_scores.iter().flatten())
            .chain(self.channel_scores.iter().flatten())
            .flatten();
        for &v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param(format!(
                    "importance entry {v} is not finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Manifold distillation distance between two block features.
pub fn md_loss(fp: &Tensor, f: &Tensor) -> Result<f64> {
    gram_diff_sq(fp, f)
}

/// `T² · mean_b KL(softmax(base/T) ‖ softmax(masked/T))`.
pub fn kd_loss(base_logits: &Tensor, masked_logits: &Tensor, temperature: f64) -> Result<f64> {
    if base_logits.shape() != masked_logits.shape() || base_logits.rank() != 2 {
        return shape_err(format!(
            "kd_loss: {:?} vs {:?}",
            base_logits.shape(),
            masked_logits.shape()
        ));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Param(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let c = base_logits.shape()[1];
    let b = base_logits.shape()[0];
    let mut total = 0.0f64;
    for (p_row, q_row) in base_logits
        .data()
        .chunks(c)
        .zip(masked_logits.data().chunks(c))
    {
        let lp = log_softmax_row_f64(p_row, temperature);
        let lq = log_softmax_row_f64(q_row, temperature);
        total += lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum::<f64>();
    }
    Ok((temperature * temperature * total / b as f64).max(0.0))
}

fn aggregate(values: impl Iterator<Item = Result<f64>>, agg: Aggregation) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    Ok(match agg {
        Aggregation::Sum => sum,
        Aggregation::Mean if n > 0 => sum / n as f64,
        Aggregation::Mean => 0.0,
    })
}

fn trajectory_parts(
    base_features: &[Tensor],
    base_logits: &Tensor,
    masked_features: &[Tensor],
    masked_logits: &Tensor,
    block: usize,
    cfg: &ScoreConfig,
    layer_loss: impl Fn(&Tensor, &Tensor) -> Result<f64>,
) -> Result<ScoreParts> {
    let layers = cfg.range.layers(block, base_features.len());
    let manifold = aggregate(
        layers.map(|z| layer_loss(&masked_features[z], &base_features[z])),
        cfg.aggregation,
    )?;
    let logit_kd = if cfg.lambda > 0.0 {
        kd_loss(base_logits, masked_logits, cfg.temperature)?
    } else {
        0.0
    };
    Ok(ScoreParts { manifold, logit_kd })
}

fn unit_mask(model: &ModelGraph, block: usize, unit: usize, kind: UnitKind) -> Result<PruneMask> {
    if block >= model.n_blocks() {
        return Err(Error::Index(format!(
            "block {block} of {}",
            model.n_blocks()
        )));
    }
    let limit = match kind {
        UnitKind::Head => model.n_heads,
        UnitKind::Neuron => model.blocks[block].ffn_dim(),
    };
    if unit >= limit {
        return Err(Error::Index(format!(
            "{kind:?} {unit} of {limit} in block {block}"
        )));
    }
    let mut mask = PruneMask::full(model);
    mask.token_counts = None;
    Ok(match kind {
        UnitKind::Head => mask.without_head(block, unit),
        UnitKind::Neuron => mask.without_neuron(block, unit),
    })
}

/// Both score terms for one head or neuron, against a cached full-mask trace.
pub fn unit_score_parts(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    cache: &crate::model::ActivationTrace,
    block: usize,
    unit: usize,
    kind: UnitKind,
    cfg: &ScoreConfig,
) -> Result<ScoreParts> {
    let mask = unit_mask(model, block, unit, kind)?;
    let masked = forward_from(model, batch, &mask, cfg.tap, block, cache)?;
    trajectory_parts(
        &cache.features,
        &cache.logits,
        &masked.features,
        &masked.logits,
        block,
        cfg,
        md_loss,
    )
}

pub fn unit_importance(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    cache: &crate::model::ActivationTrace,
    block: usize,
    unit: usize,
    kind: UnitKind,
    cfg: &ScoreConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(unit_score_parts(model, batch, cache, block, unit, kind, cfg)?.total(cfg.lambda))
}

/// Runs `f` on a pool sized by [`WORKERS_ENV`], or rayon's default pool.
fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let requested = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match requested.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Scores every head and FFN neuron. The baseline trace is computed once.
pub fn score_all(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    cfg: &ScoreConfig,
) -> Result<ImportanceTable> {
    cfg.validate()?;
    model.validate()?;
    let batch = batch.truncated(cfg.batch_size);
    let mut full = PruneMask::full(model);
    full.token_counts = None;
    let cache = forward(model, &batch, &full, cfg.tap)?;

    let units: Vec<(usize, usize, UnitKind)> = model
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            (0..model.n_heads)
                .map(move |h| (i, h, UnitKind::Head))
                .chain((0..b.ffn_dim()).map(move |n| (i, n, UnitKind::Neuron)))
        })
        .collect();
    let parts: Vec<ScoreParts> = with_workers(|| {
        units
            .par_iter()
            .map(|&(i, j, kind)| unit_score_parts(model, &batch, &cache, i, j, kind, cfg))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut head_scores: Vec<Vec<f64>> = vec![Vec::new(); model.n_blocks()];
    let mut neuron_scores: Vec<Vec<f64>> = vec![Vec::new(); model.n_blocks()];
    for (&(i, _, kind), p) in units.iter().zip(&parts) {
        let dst = match kind {
            UnitKind::Head => &mut head_scores[i],
            UnitKind::Neuron => &mut neuron_scores[i],
        };
        dst.push(p.total(cfg.lambda));
    }
    let n = parts.len().max(1) as f64;
    let diagnostics = ScoreDiagnostics {
        mean_manifold: parts.iter().map(|p| p.manifold).sum::<f64>() / n,
        mean_logit_kd: parts.iter().map(|p| p.logit_kd).sum::<f64>() / n,
    };
    if let Some(msg) = diagnostics.magnitude_warning(cfg.lambda) {
        log::warn!("{msg}");
    }
    Ok(ImportanceTable {
        schema: TABLE_SCHEMA.to_string(),
        seq_len: batch.seq_len(),
        config: *cfg,
        head_scores,
        neuron_scores,
        token_scores: None,
        channel_scores: None,
        input_hw: None,
        diagnostics: Some(diagnostics),
    })
}

/// Per-position inter-sample manifold distance: `(1/T) Σ_j ‖M(F'_j) − M(F_j)‖²`
/// with `M(F_j) = F[:, j, :] F[:, j, :]ᵀ` (a `B x B` map per token).
pub fn token_md_loss(fp: &Tensor, f: &Tensor) -> Result<f64> {
    if fp.shape() != f.shape() || f.rank() != 3 {
        return shape_err(format!(
            "token_md_loss: {:?} vs {:?}",
            fp.shape(),
            f.shape()
        ));
    }
    let (b, t, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let gather = |src: &Tensor, j: usize| -> Vec<f32> {
        (0..b)
            .flat_map(|s| {
                src.data()[(s * t + j) * w..(s * t + j + 1) * w]
                    .iter()
                    .copied()
            })
            .collect()
    };
    let mut total = 0.0;
    for j in 0..t {
        total += gram_diff_sq_rows(&gather(fp, j), &gather(f, j), b, w);
    }
    Ok(total / t as f64)
}

/// Scores every (block, token position) by zeroing the token's residual
/// vector after that block and every later one. Token 0 is pinned at
/// [`CLASS_TOKEN_SCORE`].
pub fn token_importance(
    model: &ModelGraph,
    batch: &CalibrationBatch,
    cfg: &ScoreConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let batch = batch.truncated(cfg.batch_size);
    let t = batch.seq_len();
    if t < 2 {
        return Err(Error::Arch(
            "token scoring needs at least two tokens".into(),
        ));
    }
    let mut full = PruneMask::full(model);
    full.token_counts = None;
    let cache = forward(model, &batch, &full, cfg.tap)?;
    let n = model.n_blocks();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (1..t).map(move |j| (i, j))).collect();
    let scores: Vec<f64> = with_workers(|| {
        cells
            .par_iter()
            .map(|&(i, j)| {
                let opts = ForwardOptions {
                    tap: cfg.tap,
                    token_drop: Some(TokenDrop {
                        after_block: i,
                        token: j,
                    }),
                    ..ForwardOptions::default()
                };
                let masked =
                    crate::model::forward_from_with(model, &batch, &full, &opts, i + 1, &cache)?;
                let parts = trajectory_parts(
                    &cache.features,
                    &cache.logits,
                    &masked.features,
                    &masked.logits,
                    i,
                    cfg,
                    token_md_loss,
                )?;
                Ok(parts.total(cfg.lambda))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = vec![vec![CLASS_TOKEN_SCORE; t]; n];
    for (&(i, j), s) in cells.iter().zip(scores) {
        out[i][j] = s;
    }
    Ok(out)
}

/// `(1/B) ‖Σ_b F'_b − Σ_b F_b‖²_F`.
pub fn channel_md_loss(fp: &Tensor, f: &Tensor) -> Result<f64> {
    if fp.shape() != f.shape() {
        return shape_err(format!(
            "channel_md_loss: {:?} vs {:?}",
            fp.shape(),
            f.shape()
        ));
    }
    let b = f.shape()[0];
    let per = f.numel() / b;
    let mut total = 0.0f64;
    for k in 0..per {
        let mut diff = 0.0f64;
        for s in 0..b {
            diff += fp.data()[s * per + k] as f64 - f.data()[s * per + k] as f64;
        }
        total += diff * diff;
    }
    Ok(total / b as f64)
}

/// Scores every output channel of every conv layer.
pub fn channel_importance(
    g: &CnnGraph,
    batch: &CalibrationBatch,
    cfg: &ScoreConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let images = match batch.truncated(cfg.batch_size) {
        CalibrationBatch::Features(t) if t.rank() == 4 => t,
        _ => {
            return Err(Error::Arch(
                "channel scoring needs a [B, C, H, W] batch".into(),
            ))
        }
    };
    let full = ChannelMask::full(g);
    let cache = cnn_forward(g, &images, &full)?;
    let cells: Vec<(usize, usize)> = g
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| (0..l.out_channels()).map(move |c| (i, c)))
        .collect();
    let scores: Vec<f64> = with_workers(|| {
        cells
            .par_iter()
            .map(|&(i, c)| {
                let mask = full.clone().without(i, c);
                let masked = cnn_forward_from(g, &mask, i, &cache)?;
                let parts = trajectory_parts(
                    &cache.features,
                    &cache.logits,
                    &masked.features,
                    &masked.logits,
                    i,
                    cfg,
                    channel_md_loss,
                )?;
                Ok(parts.total(cfg.lambda))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out: Vec<Vec<f64>> = g
        .layers
        .iter()
        .map(|l| vec![0.0; l.out_channels()])
        .collect();
    for (&(i, c), s) in cells.iter().zip(scores) {
        out[i][c] = s;
    }
    Ok(out)
}

/// Channel scores wrapped in a table.
pub fn score_cnn(
    g: &CnnGraph,
    batch: &CalibrationBatch,
    cfg: &ScoreConfig,
) -> Result<ImportanceTable> {
    let channels = channel_importance(g, batch, cfg)?;
    let hw = match batch {
        CalibrationBatch::Features(t) => [t.shape()[2], t.shape()[3]],
        _ => unreachable!("channel_importance accepts only image batches"),
    };
    Ok(ImportanceTable {
        schema: TABLE_SCHEMA.to_string(),
        seq_len: 0,
        config: *cfg,
        head_scores: Vec::new(),
        neuron_scores: Vec::new(),
        token_scores: None,
        channel_scores: Some(channels),
        input_hw: Some(hw),
        diagnostics: None,
    })
}
