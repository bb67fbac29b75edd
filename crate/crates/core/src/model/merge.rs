//! Token reduction between blocks: bipartite soft matching and random pruning.
//!
//! Token 0 is the class token and always survives untouched.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Output token `k` is the arithmetic mean of source rows `groups[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
}

impl MergePlan {
    pub fn identity(t: usize) -> Self {
        Self {
            groups: (0..t).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Applies the plan to a `[T, width]` row block.
    pub fn apply(&self, rows: &[f32], width: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.groups.len() * width);
        for g in &self.groups {
            if g.len() == 1 {
                out.extend_from_slice(&rows[g[0] * width..(g[0] + 1) * width]);
                continue;
            }
            let mut acc = vec![0.0f64; width];
            for &src in g {
                for (a, &v) in acc.iter_mut().zip(&rows[src * width..(src + 1) * width]) {
                    *a += v as f64;
                }
            }
            let n = g.len() as f64;
            out.extend(acc.into_iter().map(|a| (a / n) as f32));
        }
        out
    }

    /// Composition: apply `self` first, then `next`.
    pub fn then(&self, next: &MergePlan) -> MergePlan {
        MergePlan {
            groups: next
                .groups
                .iter()
                .map(|g| {
                    let mut merged: Vec<usize> = g
                        .iter()
                        .flat_map(|&k| self.groups[k].iter().copied())
                        .collect();
                    merged.sort_unstable();
                    merged
                })
                .collect(),
        }
    }
}

/// Largest `r` a single bipartite round can remove from `t` tokens.
pub fn max_bipartite_r(t: usize) -> usize {
    t.saturating_sub(1) / 2
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// One round of bipartite soft matching on a single `[t, d]` sample.
///
/// Non-class tokens alternate into sets A (positions 1, 3, ...) and
/// B (2, 4, ...). Each A token is scored by its best cosine match in B; the
/// `r` highest-scoring A tokens are averaged into their matches.
pub fn bipartite_plan(rows: &[f32], t: usize, d: usize, r: usize) -> Result<MergePlan> {
    if r > max_bipartite_r(t) {
        return Err(Error::Param(format!(
            "merge count {r} exceeds {} for {t} tokens",
            max_bipartite_r(t)
        )));
    }
    if r == 0 {
        return Ok(MergePlan::identity(t));
    }
    let row = |i: usize| &rows[i * d..(i + 1) * d];
    let set_a: Vec<usize> = (1..t).step_by(2).collect();
    let set_b: Vec<usize> = (2..t).step_by(2).collect();
    // (score, a, matched b)
    let mut edges: Vec<(f64, usize, usize)> = set_a
        .iter()
        .map(|&a| {
            let mut best = (f64::NEG_INFINITY, set_b[0]);
            for &b in &set_b {
                let s = cosine(row(a), row(b));
                if s > best.0 {
                    best = (s, b);
                }
            }
            (best.0, a, best.1)
        })
        .collect();
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut absorbed_into = vec![None; t];
    for &(_, a, b) in edges.iter().take(r) {
        absorbed_into[a] = Some(b);
    }
    let mut groups = Vec::with_capacity(t - r);
    let mut slot = vec![usize::MAX; t];
    for i in 0..t {
        if absorbed_into[i].is_none() {
            slot[i] = groups.len();
            groups.push(vec![i]);
        }
    }
    for (a, into) in absorbed_into.iter().enumerate() {
        if let Some(b) = *into {
            groups[slot[b]].push(a);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(MergePlan { groups })
}

/// Drops `r` uniformly chosen non-class tokens from a `t`-token sample.
pub fn random_prune_plan(t: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<MergePlan> {
    if t == 0 || r > t - 1 {
        return Err(Error::Param(format!("cannot drop {r} of {t} tokens")));
    }
    let mut dropped = vec![false; t];
    for i in sample(rng, t - 1, r).into_iter() {
        dropped[i + 1] = true;
    }
    Ok(MergePlan {
        groups: (0..t).filter(|&i| !dropped[i]).map(|i| vec![i]).collect(),
    })
}

/// How scheduled token reductions are realized at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenReducer {
    #[default]
    Bipartite,
    RandomPrune {
        seed: u64,
    },
}

impl TokenReducer {
    /// Plan reducing one `[t, d]` sample to `target` tokens.
    ///
    /// Bipartite merging removes at most `⌊(t−1)/2⌋` tokens per round, so
    /// larger reductions run several rounds. A lone non-class token (t = 2)
    /// has no partner and is dropped.
    pub(crate) fn reduce(
        &self,
        rows: &[f32],
        t: usize,
        d: usize,
        target: usize,
        stream: u64,
    ) -> Result<MergePlan> {
        if target == 0 || target > t {
            return Err(Error::TokenOverflow(format!(
                "cannot reduce {t} tokens to {target}"
            )));
        }
        match *self {
            TokenReducer::RandomPrune { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                random_prune_plan(t, t - target, &mut rng)
            }
            TokenReducer::Bipartite => {
                let mut plan = MergePlan::identity(t);
                let mut cur_rows = rows.to_vec();
                let mut cur = t;
                while cur > target {
                    let r = (cur - target).min(max_bipartite_r(cur));
                    let step = if r == 0 {
                        MergePlan {
                            groups: (0..cur - 1).map(|i| vec![i]).collect(),
                        }
                    } else {
                        bipartite_plan(&cur_rows, cur, d, r)?
                    };
                    cur_rows = step.apply(&cur_rows, d);
                    cur = step.len();
                    plan = plan.then(&step);
                }
                Ok(plan)
            }
        }
    }
}

fn check_rank3(f: &Tensor) -> Result<(usize, usize, usize)> {
    if f.rank() != 3 {
        return shape_err("token reduction expects [B, T, D]");
    }
    Ok((f.shape()[0], f.shape()[1], f.shape()[2]))
}

/// Merges `r` tokens per sample with bipartite soft matching.
pub fn bipartite_merge(f: &Tensor, r: usize) -> Result<Tensor> {
    let (b, t, d) = check_rank3(f)?;
    let mut out = Vec::with_capacity(b * (t.saturating_sub(r)) * d);
    for sample in f.data().chunks(t * d) {
        let plan = bipartite_plan(sample, t, d, r)?;
        out.extend(plan.apply(sample, d));
    }
    Tensor::new(vec![b, t - r, d], out)
}

/// Drops `r` non-class tokens per sample, uniformly at random under `seed`.
pub fn random_prune_tokens(f: &Tensor, r: usize, seed: u64) -> Result<Tensor> {
    let (b, t, d) = check_rank3(f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(b * t.saturating_sub(r) * d);
    for sample in f.data().chunks(t * d) {
        let plan = random_prune_plan(t, r, &mut rng)?;
        out.extend(plan.apply(sample, d));
    }
    Tensor::new(vec![b, t - r, d], out)
}
