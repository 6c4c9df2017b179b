//! The decentralized strategy against exact oracles.

mod common;

use common::{scalar_spec, ScalarShared, ScalarType, BENCH_SHARED, BENCH_TYPE};
use mflq::meanfield::solve_consistency;
use mflq::oracle::{classical_lq, compare_with_tree, CompareOptions, ScenarioTree};
use mflq::population::synthesize;
use nalgebra::DVector;
use proptest::prelude::*;

fn coupled_type() -> impl Strategy<Value = ScalarType> {
    (-0.5..0.5f64, -0.5..0.5f64, 0.5..2.0f64, 0.0..0.5f64, -1.0..1.0f64, -0.5..0.5f64).prop_map(|(a, h, r, s, x, e)| {
        ScalarType { drift: a, backward_drift: h, control_weight: r, sigma: s, initial: x, terminal_offset: e }
    })
}

fn coupled_shared() -> impl Strategy<Value = ScalarShared> {
    (0.5..1.5f64, prop::array::uniform7(-0.3..0.3f64), 0.0..1.0f64, 0.5..2.0f64, 0.0..0.5f64).prop_map(|(b, c, phi, q, gamma)| {
        ScalarShared { b, d: c[0], f: c[1], k: c[2], l: c[3], m: c[4], phi, q, s: c[5], gamma }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tree_optimum_is_never_beaten(ty in coupled_type(), sh in coupled_shared(), agents in 1usize..=2, steps in 2usize..=4) {
        let spec = scalar_spec(&[ty], sh, &[agents], 1.0, steps);
        let cmp = compare_with_tree(&spec, &CompareOptions { paths: 10, ..CompareOptions::default() }).unwrap();
        let scale = cmp.optimum.cost.abs().max(1.0);
        prop_assert!(cmp.strategy_cost >= cmp.optimum.cost - 1e-10 * scale, "{} < {}", cmp.strategy_cost, cmp.optimum.cost);
        prop_assert!(cmp.optimum.residual <= 1e-10);
        let tree = ScenarioTree::new(&spec).unwrap();
        prop_assert!((tree.cost(&cmp.optimum.controls) - cmp.optimum.cost).abs() <= 1e-12 * scale);
        let mut shifted = cmp.optimum.controls.clone();
        for (j, u) in shifted.iter_mut().enumerate() {
            *u += 1e-3 * ((j as f64) * 0.7).sin();
        }
        prop_assert!(tree.cost(&shifted) >= cmp.optimum.cost - 1e-12 * scale);
    }

    #[test]
    fn uncoupled_feedback_matches_the_regulator(ty in coupled_type(), b in 0.5..1.5f64, d in -0.3..0.3f64, q in 0.5..2.0f64) {
        let sh = ScalarShared { b, d, f: 0.0, k: 0.0, l: 0.0, m: 0.0, phi: 0.0, q, s: 0.0, gamma: 0.0 };
        let spec = scalar_spec(&[ty], sh, &[2], 1.0, 200);
        let mf = solve_consistency(&spec).unwrap();
        let st = synthesize(&spec, &mf, None).unwrap();
        let lq = classical_lq(&spec, 0).unwrap();
        for m in (0..=200).step_by(40) {
            let x = ty.initial + 0.5 * (m as f64 * 0.03).cos();
            let a = st.control(0, m, &DVector::from_vec(vec![x - ty.initial, 0.0]), &[]);
            let b = lq.control(m, &DVector::from_element(1, x));
            prop_assert!((a - b).amax() <= 1e-5, "node {}", m);
        }
    }
}

#[test]
fn benchmark_gap_shrinks_from_two_to_three_agents() {
    let gap = |agents| {
        let spec = scalar_spec(&[BENCH_TYPE], BENCH_SHARED, &[agents], 1.0, 5);
        compare_with_tree(&spec, &CompareOptions { paths: 100, ..CompareOptions::default() }).unwrap().gap_per_agent()
    };
    let (two, three) = (gap(2), gap(3));
    assert!(two > 0.0 && three > 0.0);
    assert!(three <= two, "{three} > {two}");
}
