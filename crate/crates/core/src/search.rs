//! Budgeted mask search and token schedule derivation.
//!
//! Heads are added in global descending importance; after each head the
//! highest-ranked neurons are packed until the next one would exceed the
//! budget. The step with the largest cumulative importance wins. Any FLOPs
//! still over budget can then be removed by dropping tokens in ascending
//! importance.

use crate::cnn::{cnn_flops, ChannelMask, CnnGraph};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::model::{BlockMask, PruneMask};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::str::FromStr;

/// One candidate in the head sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub heads: usize,
    pub neurons: usize,
    pub cumulative_importance: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub mask: PruneMask,
    pub cumulative_importance: f64,
    pub achieved_flops: u64,
    pub budget: u64,
    pub baseline: u64,
    pub steps: Vec<SearchStep>,
}

impl SearchResult {
    pub fn achieved_ratio(&self) -> f64 {
        self.achieved_flops as f64 / self.baseline as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Unit {
    block: usize,
    index: usize,
    score: f64,
}

/// Descending score, then `(block, index)`.
fn rank(a: &Unit, b: &Unit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.block.cmp(&b.block))
        .then(a.index.cmp(&b.index))
}

fn check_table(table: &ImportanceTable, cost: &CostModel) -> Result<()> {
    let n = cost.n_blocks();
    if table.head_scores.len() != n || table.neuron_scores.len() != n {
        return Err(Error::MaskMismatch(format!(
            "table covers {} / {} blocks, model has {n}",
            table.head_scores.len(),
            table.neuron_scores.len()
        )));
    }
    for i in 0..n {
        if table.head_scores[i].len() != cost.n_heads
            || table.neuron_scores[i].len() != cost.ffn_dims[i]
        {
            return Err(Error::MaskMismatch(format!(
                "block {i}: table {}x{} vs model {}x{}",
                table.head_scores[i].len(),
                table.neuron_scores[i].len(),
                cost.n_heads,
                cost.ffn_dims[i]
            )));
        }
    }
    table.check()
}

fn ranked(scores: &[Vec<f64>]) -> Vec<Unit> {
    let mut units: Vec<Unit> = scores
        .iter()
        .enumerate()
        .flat_map(|(block, row)| {
            row.iter().enumerate().map(move |(index, &score)| Unit {
                block,
                index,
                score,
            })
        })
        .collect();
    units.sort_by(rank);
    units
}

/// Head order used by the sweep: the best head of every block first (a
/// block always keeps one), then the rest in global rank order.
fn head_order(table: &ImportanceTable) -> Vec<Unit> {
    let all = ranked(&table.head_scores);
    let mut seen = vec![false; table.head_scores.len()];
    let (mut first, mut rest) = (Vec::new(), Vec::new());
    for u in all {
        if seen[u.block] {
            rest.push(u);
        } else {
            seen[u.block] = true;
            first.push(u);
        }
    }
    first.extend(rest);
    first
}

fn empty_mask(cost: &CostModel) -> PruneMask {
    PruneMask {
        blocks: cost
            .ffn_dims
            .iter()
            .map(|&f| BlockMask {
                heads: vec![false; cost.n_heads],
                neurons: vec![false; f],
            })
            .collect(),
        token_counts: None,
    }
}

fn build_mask(cost: &CostModel, heads: &[Unit], neurons: &[Unit]) -> PruneMask {
    let mut mask = empty_mask(cost);
    for h in heads {
        mask.blocks[h.block].heads[h.index] = true;
    }
    for u in neurons {
        mask.blocks[u.block].neurons[u.index] = true;
    }
    mask
}

fn sum_scores(heads: &[Unit], neurons: &[Unit]) -> f64 {
    heads.iter().chain(neurons).map(|u| u.score).sum()
}

fn infeasible(cost: &CostModel, budget: u64) -> Error {
    Error::InfeasibleBudget(format!(
        "budget {budget} below the minimal mask cost {} (one head per block, no neurons)",
        cost.minimal_flops(None)
    ))
}

/// Greedy partitioned search over head counts `N..=N·H`.
pub fn mask_search(table: &ImportanceTable, cost: &CostModel, budget: u64) -> Result<SearchResult> {
    check_table(table, cost)?;
    let t = cost.tokens_entering(None);
    let heads = head_order(table);
    let neurons = ranked(&table.neuron_scores);
    let n = cost.n_blocks();
    let tail_and_overhead = cost.flops_counts(&vec![0; n], &vec![0; n], None);

    let mut steps = Vec::new();
    let mut best: Option<(usize, usize, f64)> = None;
    let mut head_flops = tail_and_overhead;
    let mut head_score = 0.0;
    for k in 1..=heads.len() {
        let h = heads[k - 1];
        head_flops += cost.head_cost(t[h.block]);
        head_score += h.score;
        if k < n {
            continue;
        }
        if head_flops > budget {
            break;
        }
        let mut flops = head_flops;
        let mut score = head_score;
        let mut fill = 0;
        for u in &neurons {
            let c = cost.neuron_cost(t[u.block]);
            if flops + c > budget {
                break;
            }
            flops += c;
            score += u.score;
            fill += 1;
        }
        steps.push(SearchStep {
            heads: k,
            neurons: fill,
            cumulative_importance: score,
            flops,
        });
        if best.is_none_or(|(_, _, s)| score > s) {
            best = Some((k, fill, score));
        }
    }
    let (k, fill, _) = best.ok_or_else(|| infeasible(cost, budget))?;
    let mut mask = build_mask(cost, &heads[..k], &neurons[..fill]);
    mask.token_counts = cost.default_counts.clone();
    let achieved_flops = cost.flops(&mask)?;
    Ok(SearchResult {
        cumulative_importance: sum_scores(&heads[..k], &neurons[..fill]),
        mask,
        achieved_flops,
        budget,
        baseline: cost.baseline(),
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Every (head count, neuron prefix) pair of the partitioned space.
    Partitioned,
    /// Every subset keeping at least one head per block.
    AllSubsets,
}

/// Largest unit count [`OracleMode::AllSubsets`] accepts.
pub const MAX_SUBSET_UNITS: usize = 24;

/// Exhaustive reference for [`mask_search`], scoring candidates with the
/// full [`CostModel::flops`].
pub fn brute_force_oracle(
    table: &ImportanceTable,
    cost: &CostModel,
    budget: u64,
    mode: OracleMode,
) -> Result<SearchResult> {
    check_table(table, cost)?;
    let mut steps = Vec::new();
    let best = match mode {
        OracleMode::Partitioned => {
            let heads = head_order(table);
            let neurons = ranked(&table.neuron_scores);
            let mut best: Option<(f64, PruneMask, u64)> = None;
            for k in cost.n_blocks()..=heads.len() {
                let mut step_best: Option<(usize, f64, u64)> = None;
                for p in 0..=neurons.len() {
                    let mask = build_mask(cost, &heads[..k], &neurons[..p]);
                    let flops = cost.flops(&mask)?;
                    if flops > budget {
                        continue;
                    }
                    let score = sum_scores(&heads[..k], &neurons[..p]);
                    if step_best.is_none_or(|(_, s, _)| score >= s) {
                        step_best = Some((p, score, flops));
                    }
                }
                let Some((p, score, flops)) = step_best else {
                    continue;
                };
                steps.push(SearchStep {
                    heads: k,
                    neurons: p,
                    cumulative_importance: score,
                    flops,
                });
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, build_mask(cost, &heads[..k], &neurons[..p]), flops));
                }
            }
            best
        }
        OracleMode::AllSubsets => {
            let mut units: Vec<(bool, Unit)> = Vec::new();
            for (block, row) in table.head_scores.iter().enumerate() {
                for (index, &score) in row.iter().enumerate() {
                    units.push((
                        true,
                        Unit {
                            block,
                            index,
                            score,
                        },
                    ));
                }
            }
            for (block, row) in table.neuron_scores.iter().enumerate() {
                for (index, &score) in row.iter().enumerate() {
                    units.push((
                        false,
                        Unit {
                            block,
                            index,
                            score,
                        },
                    ));
                }
            }
            if units.len() > MAX_SUBSET_UNITS {
                return Err(Error::TooLarge(format!(
                    "{} units exceed the subset oracle limit of {MAX_SUBSET_UNITS}",
                    units.len()
                )));
            }
            let n = cost.n_blocks();
            let mut best: Option<(f64, u32)> = None;
            let mut heads = vec![0usize; n];
            let mut neurons = vec![0usize; n];
            for bits in 0u32..(1u32 << units.len()) {
                heads.fill(0);
                neurons.fill(0);
                let mut score = 0.0;
                for (i, (is_head, u)) in units.iter().enumerate() {
                    if bits >> i & 1 == 1 {
                        if *is_head {
                            heads[u.block] += 1;
                        } else {
                            neurons[u.block] += 1;
                        }
                        score += u.score;
                    }
                }
                if heads.contains(&0) {
                    continue;
                }
                let flops = cost.flops_counts(&heads, &neurons, None);
                if flops <= budget && best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, bits));
                }
            }
            best.map(|(score, bits)| {
                let mut mask = empty_mask(cost);
                for (i, (is_head, u)) in units.iter().enumerate() {
                    if bits >> i & 1 == 1 {
                        let b = &mut mask.blocks[u.block];
                        if *is_head {
                            b.heads[u.index] = true;
                        } else {
                            b.neurons[u.index] = true;
                        }
                    }
                }
                (score, mask, 0)
            })
        }
    };
    let (cumulative_importance, mut mask, _) = best.ok_or_else(|| infeasible(cost, budget))?;
    mask.token_counts = cost.default_counts.clone();
    Ok(SearchResult {
        achieved_flops: cost.flops(&mask)?,
        mask,
        cumulative_importance,
        budget,
        baseline: cost.baseline(),
        steps,
    })
}

/// Per-block token counts plus the removals that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSchedule {
    /// Tokens alive after each block.
    pub counts: Vec<usize>,
    /// Effective `(block, token)` removals in the order applied.
    pub removals: Vec<(usize, usize)>,
    pub achieved_flops: u64,
}

/// Drops `(block, token)` units in ascending score until `mask` fits
/// `budget`. Dropping token `t` after block `i` removes it from every later
/// block too, so only a token's earliest drop matters, and drops that save
/// nothing are skipped. Ties go to the later block, then the higher token
/// index.
pub fn token_schedule(
    token_scores: &[Vec<f64>],
    cost: &CostModel,
    mask: &PruneMask,
    budget: u64,
) -> Result<TokenSchedule> {
    let n = cost.n_blocks();
    let t = cost.seq_len;
    if token_scores.len() != n || token_scores.iter().any(|r| r.len() != t) {
        return Err(Error::MaskMismatch(format!(
            "token scores must be {n} x {t} for this model and batch"
        )));
    }
    let mut counts = vec![t; n];
    let mut with_counts = mask.clone();
    with_counts.token_counts = Some(counts.clone());
    let mut flops = cost.flops(&with_counts)?;
    if flops <= budget {
        return Ok(TokenSchedule {
            counts,
            removals: Vec::new(),
            achieved_flops: flops,
        });
    }
    with_counts.token_counts = Some(vec![1; n]);
    let floor = cost.flops(&with_counts)?;
    if floor > budget {
        return Err(Error::InfeasibleBudget(format!(
            "budget {budget} below {floor}, the cost at one token per block"
        )));
    }

    let mut units: Vec<(usize, usize, f64)> = token_scores
        .iter()
        .enumerate()
        .flat_map(|(i, row)| (1..t).map(move |j| (i, j, row[j])))
        .collect();
    units.sort_by(|a, b| a.2.total_cmp(&b.2).then(b.0.cmp(&a.0)).then(b.1.cmp(&a.1)));

    let mut dropped_at = vec![usize::MAX; t];
    let mut removals = Vec::new();
    for (i, j, _) in units {
        if dropped_at[j] <= i {
            continue;
        }
        let prev = dropped_at[j].min(n);
        let mut trial = counts.clone();
        for c in &mut trial[i..prev] {
            *c -= 1;
        }
        with_counts.token_counts = Some(trial.clone());
        let trial_flops = cost.flops(&with_counts)?;
        // e.g. a drop after the last block under first-token pooling
        if trial_flops >= flops {
            continue;
        }
        counts = trial;
        flops = trial_flops;
        dropped_at[j] = i;
        removals.push((i, j));
        if flops <= budget {
            break;
        }
    }
    Ok(TokenSchedule {
        counts,
        removals,
        achieved_flops: flops,
    })
}

/// How the FLOPs reduction is split between units and tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Heads and neurons only.
    #[default]
    Base,
    /// Heads and neurons take part of the reduction, tokens the rest.
    Expanded,
    /// Tokens only.
    TokensOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Base => "beta",
            Mode::Expanded => "tau",
            Mode::TokensOnly => "tau-inf",
        }
    }

    pub fn uses_tokens(self) -> bool {
        self != Mode::Base
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beta" | "β" | "base" => Ok(Mode::Base),
            "tau" | "τ" | "expanded" => Ok(Mode::Expanded),
            "tau-inf" | "tau_inf" | "τ∞" | "tokens" => Ok(Mode::TokensOnly),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Share of the reduction left to tokens in [`Mode::Expanded`].
pub const DEFAULT_TOKEN_SHARE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub mode: Mode,
    pub mask: PruneMask,
    pub search: SearchResult,
    pub schedule: Option<TokenSchedule>,
    pub budget: u64,
    pub achieved_flops: u64,
}

/// Runs the search for `mode`. Token modes need `table.token_scores`.
pub fn plan(
    table: &ImportanceTable,
    cost: &CostModel,
    budget: u64,
    mode: Mode,
    token_share: f64,
) -> Result<Plan> {
    if !(0.0..=1.0).contains(&token_share) {
        return Err(Error::Param(format!(
            "token share {token_share} outside [0, 1]"
        )));
    }
    let unit_budget = match mode {
        Mode::Base => budget,
        Mode::TokensOnly => cost.baseline(),
        Mode::Expanded => {
            let gap = cost.baseline().saturating_sub(budget) as f64;
            cost.baseline() - (gap * (1.0 - token_share)).floor() as u64
        }
    };
    let search = mask_search(table, cost, unit_budget)?;
    let mut mask = search.mask.clone();
    let schedule = if mode.uses_tokens() {
        let scores = table
            .token_scores
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} needs token scores", mode.as_str())))?;
        let s = token_schedule(scores, cost, &mask, budget)?;
        mask.token_counts = Some(s.counts.clone());
        Some(s)
    } else {
        None
    };
    let achieved_flops = cost.flops(&mask)?;
    Ok(Plan {
        mode,
        mask,
        search,
        schedule,
        budget,
        achieved_flops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSearchResult {
    pub mask: ChannelMask,
    pub cumulative_importance: f64,
    pub achieved_flops: u64,
    pub budget: u64,
    pub baseline: u64,
}

/// Removes channels in ascending importance, keeping one per layer, until
/// the network fits `budget` at input size `h x w`.
pub fn channel_search(
    g: &CnnGraph,
    scores: &[Vec<f64>],
    budget: u64,
    h: usize,
    w: usize,
) -> Result<ChannelSearchResult> {
    if scores.len() != g.layers.len()
        || scores
            .iter()
            .zip(&g.layers)
            .any(|(s, l)| s.len() != l.out_channels())
    {
        return Err(Error::MaskMismatch(
            "channel scores do not match the network".into(),
        ));
    }
    let mut mask = ChannelMask::full(g);
    let baseline = cnn_flops(g, &mask, h, w)?;
    let mut units = ranked(scores);
    units.reverse();
    let mut kept: Vec<usize> = scores.iter().map(Vec::len).collect();
    let mut flops = baseline;
    for u in units {
        if flops <= budget {
            break;
        }
        if kept[u.block] == 1 {
            continue;
        }
        mask.layers[u.block][u.index] = false;
        kept[u.block] -= 1;
        flops = cnn_flops(g, &mask, h, w)?;
    }
    if flops > budget {
        return Err(Error::InfeasibleBudget(format!(
            "budget {budget} below {flops}, the cost at one channel per layer"
        )));
    }
    let cumulative_importance = scores
        .iter()
        .zip(&mask.layers)
        .flat_map(|(s, m)| s.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v))
        .sum();
    Ok(ChannelSearchResult {
        mask,
        cumulative_importance,
        achieved_flops: flops,
        budget,
        baseline,
    })
}
