//! Base-versus-pruned comparisons and budget sweeps.

use crate::cnn::{cnn_forward, ChannelMask, CnnGraph};
use crate::cost::{budget_from_ratio, CostModel};
use crate::error::{Error, Result};
use crate::importance::{kd_loss, ImportanceTable};
use crate::io::LabeledBatch;
use crate::model::{forward, CalibrationBatch, ModelGraph, PruneMask, TapPoint};
use crate::search::{mask_search, plan, Mode};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline_flops: u64,
    pub pruned_flops: u64,
    pub flops_ratio: f64,
    /// Mean `KL(base ‖ pruned)` at temperature 1.
    pub logit_kl: f64,
    /// Fraction of samples whose argmax class is unchanged.
    pub agreement: f64,
    pub base_accuracy: Option<f64>,
    pub pruned_accuracy: Option<f64>,
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Argmax class per sample.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    argmax_rows(logits)
}

fn compare(
    base: &Tensor,
    pruned: &Tensor,
    labels: Option<&[i32]>,
    baseline_flops: u64,
    pruned_flops: u64,
) -> Result<EvalReport> {
    let (pb, pp) = (argmax_rows(base), argmax_rows(pruned));
    let n = pb.len() as f64;
    let agree = pb.iter().zip(&pp).filter(|(a, b)| a == b).count() as f64 / n;
    let acc = |pred: &[usize]| {
        labels.map(|l| {
            pred.iter()
                .zip(l)
                .filter(|(&p, &y)| p as i64 == y as i64)
                .count() as f64
                / n
        })
    };
    Ok(EvalReport {
        baseline_flops,
        pruned_flops,
        flops_ratio: pruned_flops as f64 / baseline_flops as f64,
        logit_kl: kd_loss(base, pruned, 1.0)?,
        agreement: agree,
        base_accuracy: acc(&pb),
        pruned_accuracy: acc(&pp),
    })
}

/// Runs `batch` through the unpruned model and under `mask`.
pub fn evaluate(model: &ModelGraph, batch: &LabeledBatch, mask: &PruneMask) -> Result<EvalReport> {
    let cost = CostModel::new(model, batch.batch.seq_len())?;
    let mut full = PruneMask::full(model);
    full.token_counts = None;
    let base = forward(model, &batch.batch, &full, TapPoint::Ffn)?;
    let pruned = forward(model, &batch.batch, mask, TapPoint::Ffn)?;
    let baseline = cost.flops(&full)?;
    compare(
        &base.logits,
        &pruned.logits,
        batch.labels.as_deref(),
        baseline,
        cost.flops(mask)?,
    )
}

fn image_batch(batch: &CalibrationBatch) -> Result<(&Tensor, usize, usize)> {
    match batch {
        CalibrationBatch::Features(t) if t.rank() == 4 => Ok((t, t.shape()[2], t.shape()[3])),
        _ => Err(Error::Arch("cnn needs a [B, C, H, W] batch".into())),
    }
}

pub fn evaluate_cnn(g: &CnnGraph, batch: &LabeledBatch, mask: &ChannelMask) -> Result<EvalReport> {
    let (images, h, w) = image_batch(&batch.batch)?;
    let full = ChannelMask::full(g);
    let base = cnn_forward(g, images, &full)?;
    let pruned = cnn_forward(g, images, mask)?;
    compare(
        &base.logits,
        &pruned.logits,
        batch.labels.as_deref(),
        crate::cnn::cnn_flops(g, &full, h, w)?,
        crate::cnn::cnn_flops(g, mask, h, w)?,
    )
}

/// Masks from [`mask_search`] over uniformly random scores at the same
/// budget, so they face the same feasibility constraints as a scored mask.
pub fn random_masks(
    table: &ImportanceTable,
    cost: &CostModel,
    budget: u64,
    count: usize,
    seed: u64,
) -> Result<Vec<PruneMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut random = table.clone();
        for row in random
            .head_scores
            .iter_mut()
            .chain(random.neuron_scores.iter_mut())
        {
            row.iter_mut().for_each(|v| *v = rng.gen());
        }
        out.push(mask_search(&random, cost, budget)?.mask);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget_ratio: f64,
    pub achieved_ratio: f64,
    pub agreement: f64,
    pub logit_kl: f64,
    pub cum_importance: f64,
}

/// One search and evaluation per budget ratio.
pub fn budget_sweep(
    model: &ModelGraph,
    batch: &LabeledBatch,
    table: &ImportanceTable,
    ratios: &[f64],
    mode: Mode,
    token_share: f64,
) -> Result<Vec<SweepRow>> {
    let cost = CostModel::new(model, batch.batch.seq_len())?;
    ratios
        .iter()
        .map(|&r| {
            let budget = budget_from_ratio(&cost, r)?;
            let p = plan(table, &cost, budget, mode, token_share)?;
            let report = evaluate(model, batch, &p.mask)?;
            Ok(SweepRow {
                budget_ratio: r,
                achieved_ratio: report.flops_ratio,
                agreement: report.agreement,
                logit_kl: report.logit_kl,
                cum_importance: p.search.cumulative_importance,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
