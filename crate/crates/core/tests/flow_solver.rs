mod common;

use mapd_core::mincost_flow::{max_flow_value, solve_min_cost_flow, FlowError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_exhaustive_oracle_on_small_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut nontrivial = 0;
    for _ in 0..300 {
        let integer = rng.gen_bool(0.5);
        let mut net = common::random_network(&mut rng, 8, 14, integer);
        let max = max_flow_value(&net).min(6);
        net.set_required(rng.gen_range(0..=max));
        let sol = solve_min_cost_flow(&net).unwrap();
        sol.check_feasible(&net).unwrap();
        let oracle = common::brute_force_min_cost(&net).expect("feasible by construction");
        assert!(
            (sol.total_cost - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()),
            "{} vs {oracle}\n{}",
            sol.total_cost,
            net.to_dimacs()
        );
        assert!(common::no_negative_residual_cycle(&net, &sol));
        if net.required() > 0 && oracle > 0.0 {
            nontrivial += 1;
        }
    }
    assert!(nontrivial > 100, "only {nontrivial} nontrivial instances");
}

#[test]
fn over_requirement_is_infeasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mut net = common::random_network(&mut rng, 8, 14, true);
        let max = max_flow_value(&net);
        if max > 1000 {
            continue;
        }
        net.set_required(max + 1);
        assert_eq!(solve_min_cost_flow(&net), Err(FlowError::Infeasible { required: max + 1, max_feasible: max }));
    }
}

proptest! {
    #[test]
    fn solutions_are_feasible_and_optimal(seed in any::<u64>(), nodes in 2usize..12, edges in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = common::random_network(&mut rng, nodes, edges, false);
        let max = max_flow_value(&net).min(20);
        net.set_required(max);
        let sol = solve_min_cost_flow(&net).unwrap();
        prop_assert!(sol.check_feasible(&net).is_ok());
        prop_assert!(sol.flow.iter().enumerate().all(|(i, &f)| f <= net.effective_capacity(i)));
        let recomputed: f64 = sol.flow.iter().zip(net.edges()).map(|(&f, e)| f as f64 * e.cost).sum();
        prop_assert_eq!(recomputed, sol.total_cost);
        prop_assert!(common::no_negative_residual_cycle(&net, &sol));
    }
}
