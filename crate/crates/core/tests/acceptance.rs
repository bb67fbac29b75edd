//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test --test acceptance` (add `--release` for representative timings).

mod common;

use common::{max_abs, oracle_forward, oracle_importance, random_instance, random_mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;
use std::time::{Duration, Instant};
use trajprune::cost::{budget_from_ratio, CostModel};
use trajprune::error::Error;
use trajprune::eval::{evaluate, random_masks};
use trajprune::importance::{
    score_all, token_importance, unit_importance, Aggregation, ScoreConfig, Task, TrajectoryRange,
    UnitKind, CLASS_TOKEN_SCORE,
};
use trajprune::io::LabeledBatch;
use trajprune::model::{forward, forward_counted, PruneMask, TapPoint, DEFAULT_BATCH_SIZE};
use trajprune::search::{
    brute_force_oracle, mask_search, plan, Mode, OracleMode, DEFAULT_TOKEN_SHARE,
};
use trajprune::tensor::{gram_diff_sq, gram_diff_sq_with, GramPath, Tensor};
use trajprune::toy::{toy_feature_batch, toy_model, ToyConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn search_oracle_equivalence() -> Outcome {
    let mut compared = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, h, f) = (
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
            rng.gen_range(4..=16),
        );
        let t = rng.gen_range(2..=8);
        let (table, cost) = random_instance(&mut rng, b, h, f, t);
        let budget =
            budget_from_ratio(&cost, rng.gen_range(0.4..=0.9)).map_err(|e| e.to_string())?;
        match (
            mask_search(&table, &cost, budget),
            brute_force_oracle(&table, &cost, budget, OracleMode::Partitioned),
        ) {
            (Ok(g), Ok(o)) => {
                ensure(g.mask == o.mask, || {
                    format!("instance {seed}: masks differ")
                })?;
                ensure(g.cumulative_importance == o.cumulative_importance, || {
                    format!(
                        "instance {seed}: importance {} vs {}",
                        g.cumulative_importance, o.cumulative_importance
                    )
                })?;
                compared += 1;
            }
            (Err(Error::InfeasibleBudget(_)), Err(Error::InfeasibleBudget(_))) => {}
            (g, o) => return Err(format!("instance {seed}: {:?} vs {:?}", g.err(), o.err())),
        }
    }
    Ok(format!("100 instances, {compared} feasible, all exact"))
}

fn subset_gap() -> Outcome {
    let mut good = 0;
    let mut worst = f64::INFINITY;
    let mut seed = 0u64;
    let mut done = 0;
    while done < 50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        seed += 1;
        let (b, h) = (2, rng.gen_range(2..=3));
        let f = rng.gen_range(2..=(12 - h).min(8));
        let t = rng.gen_range(2..=8);
        let (table, cost) = random_instance(&mut rng, b, h, f, t);
        let budget =
            budget_from_ratio(&cost, rng.gen_range(0.4..=0.9)).map_err(|e| e.to_string())?;
        let (Ok(g), Ok(o)) = (
            mask_search(&table, &cost, budget),
            brute_force_oracle(&table, &cost, budget, OracleMode::AllSubsets),
        ) else {
            continue;
        };
        done += 1;
        let r = g.cumulative_importance / o.cumulative_importance;
        worst = worst.min(r);
        if r >= 0.95 {
            good += 1;
        }
    }
    ensure(good >= 45, || {
        format!("{good}/50 within 95% (worst {worst:.3})")
    })?;
    Ok(format!(
        "{good}/50 within 95% of the subset optimum, worst {worst:.3}"
    ))
}

fn forward_fidelity() -> Outcome {
    let cfg = ToyConfig {
        n_blocks: 2,
        ..ToyConfig::default()
    };
    let model = toy_model(&cfg, 42).map_err(|e| e.to_string())?;
    let batch = toy_feature_batch(cfg.d_model, 4, 6, 43);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for trial in 0..3 {
        let mask = if trial == 0 {
            PruneMask::full(&model)
        } else {
            random_mask(&model, &mut rng, 0.6)
        };
        for tap in [TapPoint::LNorm, TapPoint::Ffn, TapPoint::ImDense] {
            let ours = forward(&model, &batch, &mask, tap).map_err(|e| e.to_string())?;
            let oracle = oracle_forward(&model, &batch, &mask, tap);
            worst = worst.max(max_abs(ours.logits.data(), &oracle.logits));
            for (f, g) in ours.features.iter().zip(&oracle.features) {
                worst = worst.max(max_abs(f.data(), g));
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max-abs {worst:.3e} > 1e-5"))?;
    Ok(format!("max-abs {worst:.2e} over logits and all taps"))
}

fn loss_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_gram = 0.0f64;
    for case in 0..100 {
        let rows = rng.gen_range(1..=24);
        let cols = rng.gen_range(1..=12);
        let x: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Every fourth case is a small perturbation, where cancellation bites.
        let y: Vec<f32> = if case % 4 == 0 {
            x.iter().map(|v| v + rng.gen_range(-1e-2..1e-2)).collect()
        } else {
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let a = Tensor::new(vec![rows, cols], x).map_err(|e| e.to_string())?;
        let b = Tensor::new(vec![rows, cols], y).map_err(|e| e.to_string())?;
        let fast = gram_diff_sq(&a, &b).map_err(|e| e.to_string())?;
        let slow = gram_diff_sq_with(&a, &b, GramPath::Direct).map_err(|e| e.to_string())?;
        worst_gram = worst_gram.max(rel(fast, slow));
    }
    ensure(worst_gram <= 1e-4, || {
        format!("Gram identity relative error {worst_gram:.3e}")
    })?;

    let cfg = ToyConfig {
        n_blocks: 3,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 6,
        ..ToyConfig::default()
    };
    let model = toy_model(&cfg, 5).map_err(|e| e.to_string())?;
    let batch = toy_feature_batch(8, 4, 5, 6);
    let mut worst_unit = 0.0f64;
    let mut units = 0;
    for (tap, range, aggregation) in [
        (TapPoint::Ffn, TrajectoryRange::NextToEnd, Aggregation::Sum),
        (
            TapPoint::LNorm,
            TrajectoryRange::CurrentToEnd,
            Aggregation::Sum,
        ),
        (
            TapPoint::ImDense,
            TrajectoryRange::NextToEnd,
            Aggregation::Sum,
        ),
    ] {
        let sc = ScoreConfig {
            tap,
            range,
            aggregation,
            ..ScoreConfig::default()
        };
        let cache =
            forward(&model, &batch, &PruneMask::full(&model), tap).map_err(|e| e.to_string())?;
        for block in 0..cfg.n_blocks {
            for (kind, count) in [
                (UnitKind::Head, cfg.n_heads),
                (UnitKind::Neuron, cfg.ffn_dim),
            ] {
                for unit in 0..count {
                    let ours = unit_importance(&model, &batch, &cache, block, unit, kind, &sc)
                        .map_err(|e| e.to_string())?;
                    let full = PruneMask::full(&model);
                    let mask = match kind {
                        UnitKind::Head => full.without_head(block, unit),
                        UnitKind::Neuron => full.without_neuron(block, unit),
                    };
                    let want = oracle_importance(
                        &model,
                        &batch,
                        &mask,
                        range.layers(block, cfg.n_blocks),
                        tap,
                        sc.lambda,
                        sc.temperature,
                    );
                    worst_unit = worst_unit.max(rel(ours, want));
                    units += 1;
                }
            }
        }
    }
    ensure(worst_unit <= 1e-5, || {
        format!("unit importance relative error {worst_unit:.3e}")
    })?;
    Ok(format!(
        "Gram identity rel {worst_gram:.2e} on 100 cases; unit importance rel {worst_unit:.2e} on {units} units"
    ))
}

fn pruning_quality() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..20u64 {
        let model = toy_model(&ToyConfig::default(), 500 + seed).map_err(|e| e.to_string())?;
        let batch = LabeledBatch {
            batch: toy_feature_batch(model.d_model, 32, 8, 900 + seed),
            labels: None,
        };
        let table =
            score_all(&model, &batch.batch, &ScoreConfig::default()).map_err(|e| e.to_string())?;
        let cost = CostModel::new(&model, 8).map_err(|e| e.to_string())?;
        let budget = budget_from_ratio(&cost, 0.6).map_err(|e| e.to_string())?;
        let ours = mask_search(&table, &cost, budget).map_err(|e| e.to_string())?;
        let kl = evaluate(&model, &batch, &ours.mask)
            .map_err(|e| e.to_string())?
            .logit_kl;
        let randoms =
            random_masks(&table, &cost, budget, 20, 77 + seed).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for m in &randoms {
            total += evaluate(&model, &batch, m)
                .map_err(|e| e.to_string())?
                .logit_kl;
        }
        let mean = total / randoms.len() as f64;
        if kl < mean {
            wins += 1;
        }
        lines.push(format!("{kl:.3}/{mean:.3}"));
    }
    ensure(wins >= 18, || {
        format!("won {wins}/20 (scored/random KL: {})", lines.join(" "))
    })?;
    Ok(format!("won {wins}/20 models against 20 random masks each"))
}

fn flops_counter() -> Outcome {
    let cfg = ToyConfig {
        max_tokens: Some(10),
        pooling: trajprune::model::Pooling::Mean,
        ..ToyConfig::default()
    };
    let model = toy_model(&cfg, 3).map_err(|e| e.to_string())?;
    let (b, t) = (2, 10);
    let batch = toy_feature_batch(model.d_model, b, t, 4);
    let cost = CostModel::new(&model, t).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let keep = rng.gen_range(0.2..1.0);
        let mut mask = random_mask(&model, &mut rng, keep);
        if i % 2 == 1 {
            let mut c = t;
            let counts = (0..model.n_blocks())
                .map(|_| {
                    c = rng.gen_range(c.div_ceil(2).max(1)..=c);
                    c
                })
                .collect();
            mask.token_counts = Some(counts);
        }
        let (_, counter) =
            forward_counted(&model, &batch, &mask, TapPoint::Ffn).map_err(|e| e.to_string())?;
        let want = cost.flops(&mask).map_err(|e| e.to_string())?;
        ensure(counter.flops() == b as u64 * want, || {
            format!("mask {i}: counter {} vs {} x {want}", counter.flops(), b)
        })?;
    }
    Ok("20 masks (10 with token schedules), exact".into())
}

fn config_defaults() -> Outcome {
    let d = ScoreConfig::default();
    let checks = [
        ("temperature", d.temperature == 4.0),
        ("tap", d.tap == TapPoint::Ffn),
        ("aggregation", d.aggregation == Aggregation::Sum),
        (
            "range",
            d.range == TrajectoryRange::NextToEnd && d.range.layers(2, 6) == (3..6),
        ),
        (
            "language lambda",
            ScoreConfig::for_task(Task::Language).lambda == 0.1,
        ),
        (
            "vision lambda",
            ScoreConfig::for_task(Task::Vision).lambda == 0.01,
        ),
        ("default lambda", d.lambda == 0.1),
        ("batch", d.batch_size == 32 && DEFAULT_BATCH_SIZE == 32),
    ];
    for (name, ok) in checks {
        ensure(ok, || format!("{name} default is off"))?;
    }
    Ok("T=4, ffn tap, sum, i+1..N, lambda 0.1/0.01, batch 32".into())
}

fn token_schedule_feasibility() -> Outcome {
    let cfg = ToyConfig {
        n_blocks: 4,
        max_tokens: Some(12),
        ..ToyConfig::default()
    };
    let model = toy_model(&cfg, 21).map_err(|e| e.to_string())?;
    let batch = toy_feature_batch(model.d_model, 16, 12, 22);
    let sc = ScoreConfig::for_task(Task::Vision);
    let mut table = score_all(&model, &batch, &sc).map_err(|e| e.to_string())?;
    let tokens = token_importance(&model, &batch, &sc).map_err(|e| e.to_string())?;
    ensure(tokens.iter().all(|r| r[0] == CLASS_TOKEN_SCORE), || {
        "class token not pinned".into()
    })?;
    table.token_scores = Some(tokens);
    let cost = CostModel::new(&model, 12).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for ratio in [0.5, 0.6, 0.7, 0.8] {
        let budget = budget_from_ratio(&cost, ratio).map_err(|e| e.to_string())?;
        let p = plan(&table, &cost, budget, Mode::Expanded, DEFAULT_TOKEN_SHARE)
            .map_err(|e| e.to_string())?;
        let s = p.schedule.as_ref().ok_or("no schedule")?;
        ensure(p.achieved_flops <= budget, || {
            format!("{ratio}: over budget")
        })?;
        ensure(s.counts.windows(2).all(|w| w[1] <= w[0]), || {
            format!("{ratio}: counts increase")
        })?;
        ensure(
            s.counts.iter().all(|&c| c >= 1) && s.removals.iter().all(|&(_, j)| j != 0),
            || format!("{ratio}: class token removed"),
        )?;
        let trace = forward(&model, &batch, &p.mask, TapPoint::Ffn).map_err(|e| e.to_string())?;
        ensure(trace.token_counts == s.counts, || {
            format!("{ratio}: forward ignores schedule")
        })?;
        let Some(&(i, j)) = s.removals.last() else {
            return Err(format!("{ratio}: no token removals; tightness is vacuous"));
        };
        let prev = s.removals[..s.removals.len() - 1]
            .iter()
            .filter(|r| r.1 == j)
            .map(|r| r.0)
            .min()
            .unwrap_or(model.n_blocks());
        let mut undo = p.mask.clone();
        let mut counts = s.counts.clone();
        counts[i..prev].iter_mut().for_each(|c| *c += 1);
        undo.token_counts = Some(counts);
        ensure(
            cost.flops(&undo).map_err(|e| e.to_string())? > budget,
            || format!("{ratio}: schedule not tight"),
        )?;
        summary.push(format!("{ratio}:{:?}", s.counts));
    }
    Ok(format!(
        "tau mode feasible and tight, counts {}",
        summary.join(" ")
    ))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_trajprune");
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin)
            .current_dir(dir.path())
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
        })
    };
    run(&[
        "toy",
        "--out",
        "m.optn",
        "--batch-out",
        "b.optn",
        "--samples",
        "16",
        "--seq-len",
        "8",
        "--seed",
        "5",
    ])?;
    for tag in ["1", "2"] {
        let table = format!("t{tag}.json");
        run(&[
            "score", "--model", "m.optn", "--batch", "b.optn", "--mode", "tau", "--seed", "5",
            "--out", &table,
        ])?;
        run(&[
            "search",
            "--model",
            "m.optn",
            "--table",
            &table,
            "--mode",
            "tau",
            "--seed",
            "5",
            "--keep-ratio",
            "0.6",
            "--out",
            &format!("k{tag}.json"),
            "--report",
            &format!("r{tag}.json"),
        ])?;
    }
    for stem in ["t", "k", "r"] {
        let a =
            std::fs::read(dir.path().join(format!("{stem}1.json"))).map_err(|e| e.to_string())?;
        let b =
            std::fs::read(dir.path().join(format!("{stem}2.json"))).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{stem}*.json differ between runs"))?;
    }
    Ok("score and search outputs byte-identical".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "search-oracle equivalence",
            Some(Duration::from_secs(10)),
            search_oracle_equivalence,
        ),
        (
            "full-subset gap bound",
            Some(Duration::from_secs(60)),
            subset_gap,
        ),
        (
            "forward fidelity",
            Some(Duration::from_secs(5)),
            forward_fidelity,
        ),
        (
            "manifold and unit importance correctness",
            Some(Duration::from_secs(10)),
            loss_correctness,
        ),
        (
            "pruning quality vs random masks",
            Some(Duration::from_secs(120)),
            pruning_quality,
        ),
        ("flops counter equality", None, flops_counter),
        ("config defaults", None, config_defaults),
        (
            "token schedule feasibility",
            None,
            token_schedule_feasibility,
        ),
        ("cli determinism", None, cli_determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {took:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{took:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
