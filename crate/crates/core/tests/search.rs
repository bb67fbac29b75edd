mod common;

use common::random_instance;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajprune::cost::{budget_from_ratio, CostModel};
use trajprune::error::Error;
use trajprune::importance::{score_all, token_importance, ScoreConfig, Task};
use trajprune::model::{Pooling, PruneMask};
use trajprune::search::{
    brute_force_oracle, mask_search, plan, token_schedule, Mode, OracleMode, DEFAULT_TOKEN_SHARE,
};
use trajprune::toy::{toy_feature_batch, toy_model, ToyConfig};

fn instance(seed: u64) -> (trajprune::importance::ImportanceTable, CostModel, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(2..=4);
    let h = rng.gen_range(2..=4);
    let f = rng.gen_range(4..=16);
    let t = rng.gen_range(2..=8);
    let (table, cost) = random_instance(&mut rng, b, h, f, t);
    let budget = budget_from_ratio(&cost, rng.gen_range(0.4..=0.9)).unwrap();
    (table, cost, budget)
}

#[test]
fn greedy_equals_partitioned_oracle() {
    for seed in 0..100 {
        let (table, cost, budget) = instance(seed);
        let greedy = mask_search(&table, &cost, budget);
        let oracle = brute_force_oracle(&table, &cost, budget, OracleMode::Partitioned);
        match (greedy, oracle) {
            (Ok(g), Ok(o)) => {
                assert_eq!(g.mask, o.mask, "seed {seed}");
                assert_eq!(g.cumulative_importance, o.cumulative_importance);
            }
            (Err(Error::InfeasibleBudget(_)), Err(Error::InfeasibleBudget(_))) => {}
            (g, o) => panic!("seed {seed}: {g:?} vs {o:?}"),
        }
    }
}

#[test]
fn below_minimal_cost_is_infeasible() {
    let (table, cost, _) = instance(1);
    let min = cost.minimal_flops(None);
    assert!(matches!(
        mask_search(&table, &cost, min - 1),
        Err(Error::InfeasibleBudget(_))
    ));
    let r = mask_search(&table, &cost, min).unwrap();
    assert_eq!(r.achieved_flops, min);
}

#[test]
fn subset_oracle_rejects_large_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (table, cost) = random_instance(&mut rng, 2, 4, 10, 4);
    assert!(matches!(
        brute_force_oracle(&table, &cost, cost.baseline(), OracleMode::AllSubsets),
        Err(Error::TooLarge(_))
    ));
}

#[test]
fn plans_fit_their_budget_in_every_mode() {
    let cfg = ToyConfig {
        max_tokens: Some(10),
        ..ToyConfig::default()
    };
    let model = toy_model(&cfg, 3).unwrap();
    let batch = toy_feature_batch(model.d_model, 4, 10, 4);
    let sc = ScoreConfig::for_task(Task::Vision);
    let mut table = score_all(&model, &batch, &sc).unwrap();
    table.token_scores = Some(token_importance(&model, &batch, &sc).unwrap());
    let cost = CostModel::new(&model, 10).unwrap();
    for mode in [Mode::Base, Mode::Expanded, Mode::TokensOnly] {
        for ratio in [0.5, 0.7, 0.9, 1.0] {
            let budget = budget_from_ratio(&cost, ratio).unwrap();
            let p = plan(&table, &cost, budget, mode, DEFAULT_TOKEN_SHARE).unwrap();
            assert!(p.achieved_flops <= budget, "{mode:?} at {ratio}");
            assert_eq!(p.achieved_flops, cost.flops(&p.mask).unwrap());
            assert!(p.mask.blocks.iter().all(|b| b.heads.contains(&true)));
            if mode == Mode::TokensOnly {
                assert!(p.mask.blocks.iter().all(|b| b.is_full()));
            }
        }
    }
}

#[test]
fn token_modes_require_token_scores() {
    let model = toy_model(&ToyConfig::default(), 3).unwrap();
    let batch = toy_feature_batch(model.d_model, 2, 5, 4);
    let table = score_all(&model, &batch, &ScoreConfig::default()).unwrap();
    let cost = CostModel::new(&model, 5).unwrap();
    let budget = budget_from_ratio(&cost, 0.7).unwrap();
    assert!(matches!(
        plan(&table, &cost, budget, Mode::Expanded, 0.5),
        Err(Error::Config(_))
    ));
}

fn scaled(
    table: &trajprune::importance::ImportanceTable,
    s: f64,
) -> trajprune::importance::ImportanceTable {
    let mut t = table.clone();
    for row in t.head_scores.iter_mut().chain(t.neuron_scores.iter_mut()) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_is_feasible_and_keeps_a_head_per_block(seed in any::<u64>(), ratio in 0.05f64..=1.0) {
        let (table, cost, _) = instance(seed);
        let budget = budget_from_ratio(&cost, ratio).unwrap();
        match mask_search(&table, &cost, budget) {
            Ok(r) => {
                prop_assert!(r.achieved_flops <= budget);
                prop_assert_eq!(r.achieved_flops, cost.flops(&r.mask).unwrap());
                prop_assert!(r.mask.blocks.iter().all(|b| b.heads.contains(&true)));
            }
            Err(Error::InfeasibleBudget(_)) => prop_assert!(budget < cost.minimal_flops(None)),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn importance_is_monotone_in_budget(seed in any::<u64>(), a in 0.3f64..=1.0, b in 0.3f64..=1.0) {
        let (table, cost, _) = instance(seed);
        let (lo, hi) = (a.min(b), a.max(b));
        let lo = mask_search(&table, &cost, budget_from_ratio(&cost, lo).unwrap());
        let hi = mask_search(&table, &cost, budget_from_ratio(&cost, hi).unwrap());
        match (lo, hi) {
            (Ok(lo), Ok(hi)) => prop_assert!(lo.cumulative_importance <= hi.cumulative_importance),
            (Ok(_), Err(e)) => prop_assert!(false, "larger budget failed: {}", e),
            (Err(_), _) => {}
        }
    }

    #[test]
    fn mask_is_invariant_to_score_scale(seed in any::<u64>(), s in 1e-3f64..1e3) {
        let (table, cost, budget) = instance(seed);
        let a = mask_search(&table, &cost, budget);
        let b = mask_search(&scaled(&table, s), &cost, budget);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn token_schedule_is_feasible_monotone_and_tight(seed in any::<u64>(), ratio in 0.3f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=4);
        let t = rng.gen_range(3..=12);
        let pooling = if rng.gen() { Pooling::First } else { Pooling::Mean };
        let cost = CostModel::from_dims(8, 2, vec![6; n], 3, pooling, t, None).unwrap();
        let scores: Vec<Vec<f64>> =
            (0..n).map(|_| (0..t).map(|_| rng.gen::<f64>()).collect()).collect();
        let mask = PruneMask {
            blocks: (0..n).map(|_| trajprune::model::BlockMask::full(2, 6)).collect(),
            token_counts: None,
        };
        let budget = budget_from_ratio(&cost, ratio).unwrap();
        match token_schedule(&scores, &cost, &mask, budget) {
            Ok(s) => {
                prop_assert!(s.achieved_flops <= budget);
                prop_assert!(s.counts.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(s.counts.iter().all(|&c| c >= 1));
                prop_assert!(s.removals.iter().all(|&(_, j)| j != 0));
                let mut m = mask.clone();
                m.token_counts = Some(s.counts.clone());
                prop_assert_eq!(cost.flops(&m).unwrap(), s.achieved_flops);
                // Undoing the last removal must break the budget.
                if let Some(&(i, j)) = s.removals.last() {
                    let later = s.removals[..s.removals.len() - 1]
                        .iter()
                        .filter(|&&(_, jj)| jj == j)
                        .map(|&(ii, _)| ii)
                        .min()
                        .unwrap_or(n);
                    let mut undo = s.counts.clone();
                    for c in &mut undo[i..later] {
                        *c += 1;
                    }
                    m.token_counts = Some(undo);
                    prop_assert!(cost.flops(&m).unwrap() > budget);
                }
            }
            Err(Error::InfeasibleBudget(_)) => {
                let mut m = mask.clone();
                m.token_counts = Some(vec![1; n]);
                prop_assert!(cost.flops(&m).unwrap() > budget);
            }
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}
