//! Reproducibility and bookkeeping of population simulations.

mod common;

use common::{scalar_spec, BENCH_SHARED, BENCH_TYPE};
use mflq::meanfield::solve_consistency;
use mflq::population::{path_agent_seed, simulate_population, social_cost, synthesize, SimulationOptions};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn runs_are_pure_functions_of_the_seed(seed in any::<u64>(), agents in 1usize..6, paths in 1usize..20) {
        let spec = scalar_spec(&[BENCH_TYPE], BENCH_SHARED, &[agents], 1.0, 20);
        let mf = solve_consistency(&spec).unwrap();
        let st = synthesize(&spec, &mf, None).unwrap();
        let opts = SimulationOptions::new(paths, seed);
        let a = simulate_population(&spec, &st, &opts).unwrap();
        let b = simulate_population(&spec, &st, &opts).unwrap();
        prop_assert_eq!(&a.path_costs, &b.path_costs);
        prop_assert_eq!(&a.xbar, &b.xbar);
        let other = simulate_population(&spec, &st, &SimulationOptions::new(paths, seed ^ 1)).unwrap();
        prop_assert_ne!(&a.path_costs, &other.path_costs);
    }

    #[test]
    fn social_cost_is_the_sum_of_agent_costs(seed in any::<u64>(), agents in 1usize..6) {
        let spec = scalar_spec(&[BENCH_TYPE], BENCH_SHARED, &[agents], 1.0, 20);
        let mf = solve_consistency(&spec).unwrap();
        let st = synthesize(&spec, &mf, None).unwrap();
        let run = simulate_population(&spec, &st, &SimulationOptions::new(8, seed)).unwrap();
        let sc = social_cost(&run);
        let summed: f64 = run.agent_costs.iter().map(|c| c.total()).sum();
        prop_assert!((sc.total.mean - summed).abs() <= 1e-12 * summed.abs().max(1.0));
        prop_assert!((sc.state + sc.control + sc.initial - sc.total.mean).abs() <= 1e-12 * summed.abs().max(1.0));
        prop_assert!(sc.total.stderr >= 0.0);
    }

    #[test]
    fn generator_seeds_separate_their_inputs(seed in any::<u64>(), path in any::<u64>(), key in any::<u64>()) {
        let base = path_agent_seed(seed, path, key);
        prop_assert_ne!(base, path_agent_seed(seed.wrapping_add(1), path, key));
        prop_assert_ne!(base, path_agent_seed(seed, path.wrapping_add(1), key));
        prop_assert_ne!(base, path_agent_seed(seed, path, key.wrapping_add(1)));
    }
}

#[test]
fn noiseless_runs_have_no_sampling_error() {
    let ty = common::ScalarType { sigma: 0.0, ..BENCH_TYPE };
    let sh = common::ScalarShared { d: 0.0, ..BENCH_SHARED };
    let spec = scalar_spec(&[ty], sh, &[4], 1.0, 30);
    let mf = solve_consistency(&spec).unwrap();
    let st = synthesize(&spec, &mf, None).unwrap();
    let run = simulate_population(&spec, &st, &SimulationOptions::new(7, 3)).unwrap();
    assert_eq!(social_cost(&run).total.stderr, 0.0);
}
