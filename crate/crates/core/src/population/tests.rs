use nalgebra::DVector;

use super::sim::Simulator;
use super::*;
use crate::meanfield::solve_consistency;
use crate::model::parse_str;
use crate::model::testing::{scalar_spec, v1};

/// `(A, H, R, σ, ξ, η)`, `(B, D, F, K, L, M, Φ, Q, S, Γ)`.
fn benchmark(agents: usize, steps: usize) -> ModelSpec {
    scalar_spec([0.2, -0.1, 1.0, 0.3, 1.0, 0.1], [1.0, 0.2, 0.3, 0.1, 0.1, 0.2, 0.5, 1.0, 0.3, 0.2], agents, 1.0, steps)
}

fn two_types(steps: usize) -> ModelSpec {
    let text = r#"{
        "dims": {"n": 1, "d": 1, "K": 2, "N": 6},
        "types": [
            {"A": 0.3, "H": -0.1, "R": 1.0, "sigma": [0.3], "xi0": [1.0], "eta": [0.1]},
            {"A": -0.2, "H": 0.2, "R": 2.0, "sigma": [0.5], "xi0": [-0.5], "eta": [0.0]}
        ],
        "shared": {"B": 1.0, "D": 0.2, "F": 0.4, "Kcoef": 0.1, "L": 0.1, "M": 0.2,
                   "Phi": 0.5, "Q": 1.0, "S": 0.3, "Gamma": 0.2},
        "population": {"theta": [1, 2, 1, 2, 2, 1], "pi": [0.5, 0.5]},
        "grid": {"T": 1.0, "steps": STEPS}
    }"#;
    parse_str(&text.replace("STEPS", &steps.to_string())).unwrap()
}

fn strategy_for(spec: &ModelSpec) -> (MeanFieldProfile, StrategyField) {
    let mf = solve_consistency(spec).unwrap();
    let st = synthesize(spec, &mf, None).unwrap();
    (mf, st)
}

#[test]
fn without_mean_field_drift_real_and_auxiliary_states_coincide() {
    let spec = scalar_spec([0.2, -0.1, 1.0, 0.3, 1.0, 0.1], [1.0, 0.2, 0.0, 0.1, 0.1, 0.2, 0.5, 1.0, 0.3, 0.2], 5, 1.0, 100);
    let (_, st) = strategy_for(&spec);
    let mut opts = SimulationOptions::new(3, 11);
    opts.record = Some((2, 1));
    let run = simulate_population(&spec, &st, &opts).unwrap();
    let rec = run.recorded.unwrap();
    assert_eq!(rec.real_state.len(), 101);
    let gap = rec.real_state.iter().zip(&rec.aux_state).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    assert!(gap <= 1e-10, "gap {gap}");
    assert!(rec.real_state.iter().any(|x| (x[0] - 1.0).abs() > 1e-3));
}

#[test]
fn no_control_channels_give_zero_control() {
    let spec = scalar_spec([0.2, -0.1, 1.0, 0.3, 1.0, 0.1], [0.0, 0.0, 0.3, 0.0, 0.1, 0.2, 0.5, 1.0, 0.3, 0.2], 3, 1.0, 50);
    let (_, st) = strategy_for(&spec);
    let mut opts = SimulationOptions::new(2, 5);
    opts.record = Some((0, 0));
    let run = simulate_population(&spec, &st, &opts).unwrap();
    assert!(run.recorded.as_ref().unwrap().control.iter().all(|u| u.amax() == 0.0));
    assert_eq!(social_cost(&run).control, 0.0);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = two_types(40);
    let (_, st) = strategy_for(&spec);
    let opts = SimulationOptions::new(24, 99);
    let run_in = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate_population(&spec, &st, &opts).unwrap())
    };
    let (one, three) = (run_in(1), run_in(3));
    assert_eq!(one.path_costs, three.path_costs);
    assert_eq!(one.xbar, three.xbar);
    let again = run_in(1);
    assert_eq!(social_cost(&one), social_cost(&again));
}

#[test]
fn permuting_agents_within_a_type_with_their_noise_keeps_the_cost() {
    let spec = two_types(40);
    let (_, st) = strategy_for(&spec);
    let base = simulate_population(&spec, &st, &SimulationOptions::new(16, 3)).unwrap();
    // Type 1 holds agents 0, 2, 5; rotate them together with their keys.
    let mut opts = SimulationOptions::new(16, 3);
    opts.noise_keys = Some(vec![2, 1, 5, 3, 4, 0]);
    let permuted = simulate_population(&spec, &st, &opts).unwrap();
    let (a, b) = (social_cost(&base).total.mean, social_cost(&permuted).total.mean);
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
    let per = |r: &PopulationRun, i: usize| r.agent_costs[i].total();
    assert!((per(&base, 2) - per(&permuted, 0)).abs() <= 1e-12 * per(&base, 2).abs());
}

#[test]
fn deterministic_population_tracks_the_mean_field_at_second_order() {
    let err = |steps| {
        let spec = scalar_spec([0.2, -0.1, 1.0, 0.0, 1.0, 0.1], [1.0, 0.0, 0.0, 0.1, 0.1, 0.2, 0.5, 1.0, 0.3, 0.2], 4, 1.0, steps);
        let (mf, st) = strategy_for(&spec);
        let run = simulate_population(&spec, &st, &SimulationOptions::new(2, 1)).unwrap();
        let e = meanfield_error(&run, &mf).unwrap();
        assert_eq!(e.stderr, 0.0);
        e.mean
    };
    let (coarse, fine) = (err(100), err(200));
    assert!(coarse < 1e-4, "{coarse}");
    let ratio = coarse / fine;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn auxiliary_mean_matches_the_expectation_system() {
    let spec = two_types(400);
    let (mf, st) = strategy_for(&spec);
    let sim = Simulator::new(&spec, &st, &[], None).unwrap();
    for (agent, k) in [(0usize, 0usize), (1, 1)] {
        let out = sim.integrate(&[Variant::BASE], &[], None, 0, Some(agent)).unwrap();
        let rec = out.recorded.unwrap();
        let dev = rec.aux_state.iter().zip(&mf.e_alpha[k].values).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(dev < 5e-3, "type {k}: {dev}");
    }
}

#[test]
fn initial_cost_uses_the_exact_conditional_mean() {
    let spec = benchmark(4, 50);
    let (_, st) = strategy_for(&spec);
    let small = simulate_population(&spec, &st, &SimulationOptions::new(400, 8)).unwrap();
    let large = simulate_population(&spec, &st, &SimulationOptions::new(800, 8)).unwrap();
    for i in 0..4 {
        assert!((&small.y0[i] - &large.y0[i]).amax() < 1e-13);
        let z = (&small.y0_mc[i] - &small.y0[i]).amax() / small.y0_stderr[i][0];
        assert!(z < 4.0, "agent {i}: {z} standard errors");
        let shrink = small.y0_stderr[i][0] / large.y0_stderr[i][0];
        assert!((shrink / 2f64.sqrt() - 1.0).abs() < 0.2, "shrink {shrink}");
    }
    let gamma = spec.shared.initial_weight[(0, 0)];
    let expect: f64 = small.y0.iter().map(|y| 0.5 * gamma * y[0] * y[0]).sum();
    assert!((social_cost(&small).initial - expect).abs() < 1e-14);
}

#[test]
fn perturbation_excess_is_nonnegative() {
    let spec = two_types(40);
    let (_, st) = strategy_for(&spec);
    let dirs = direction_library(&spec, 4);
    let opts = SimulationOptions::new(40, 21);
    let mut variants = Vec::new();
    for j in 0..dirs.len() {
        variants.extend([Variant { direction: Some(j), scale: 1.0 }, Variant { direction: Some(j), scale: FD_STEP }, Variant { direction: Some(j), scale: -FD_STEP }]);
    }
    let mut all = vec![Variant::BASE];
    all.extend(variants.iter().copied());
    let base = evaluate_variants(&spec, &st, &dirs, &[Variant::BASE], &opts).unwrap().remove(0);
    let costs = evaluate_variants(&spec, &st, &dirs, &variants, &opts).unwrap();
    for j in 0..dirs.len() {
        for p in 0..opts.paths {
            let slope = (costs[3 * j + 1][p] - costs[3 * j + 2][p]) / (2.0 * FD_STEP);
            let excess = costs[3 * j][p] - base[p] - slope;
            assert!(excess >= -1e-6 * base[p].abs(), "direction {j} path {p}: {excess}");
        }
    }
}

#[test]
fn direction_library_is_normalized() {
    let spec = two_types(30);
    let dirs = direction_library(&spec, 1);
    assert_eq!(dirs.len(), 2 + RANDOM_DIRECTIONS);
    for d in &dirs {
        assert!((d.energy(spec.grid.dt()) - 6.0).abs() < 1e-12, "{}", d.name);
    }
    assert_eq!(dirs[0].values.iter().filter(|v| **v != 0.0).count(), 30);
    assert_eq!(direction_library(&spec, 1), dirs);
}

#[test]
fn gap_report_uses_central_differences() {
    let spec = two_types(30);
    let (_, st) = strategy_for(&spec);
    let dirs = direction_library(&spec, 2);
    let opts = SimulationOptions::new(20, 6);
    let rep = optimality_gap(&spec, &st, &dirs, FD_STEP, &opts).unwrap();
    let coarse = optimality_gap(&spec, &st, &dirs, 10.0 * FD_STEP, &opts).unwrap();
    assert_eq!(rep.derivatives.len(), dirs.len());
    for (a, b) in rep.derivatives.iter().zip(&coarse.derivatives) {
        assert!((a.mean - b.mean).abs() <= 1e-7 * (1.0 + a.mean.abs()));
    }
    let max = rep.derivatives.iter().map(|e| e.mean.abs()).fold(0.0, f64::max);
    assert_eq!(rep.proxy, max);
    assert!(optimality_gap(&spec, &st, &[], FD_STEP, &opts).is_err());
}

#[test]
fn random_initial_states_follow_by_superposition() {
    let mut spec = benchmark(3, 60);
    spec.types[0].initial_spread = Some(v1(0.4));
    let (mf, st) = strategy_for(&spec);
    assert_eq!(st.initial_dirs(), 1);
    let mut shifted = spec.clone();
    shifted.types[0].initial_state = v1(1.25);
    shifted.types[0].initial_spread = None;
    let direct = synthesize(&shifted, &mf, None).unwrap();
    let xt = DVector::from_vec(vec![0.3, -0.2]);
    for m in [0, 17, 60] {
        let a = st.control(0, m, &xt, &[0.25]);
        let b = direct.control(0, m, &xt, &[]);
        assert!((a - b).amax() < 1e-12);
    }
    let run = simulate_population(&spec, &st, &SimulationOptions::new(30, 2)).unwrap();
    assert!(social_cost(&run).total.mean.is_finite());
    let sim = Simulator::new(&spec, &st, &[], None).unwrap();
    let (dev, _) = sim.draw(2, 0);
    assert!(dev.iter().all(|d| d.abs() <= 1.2) && dev.iter().any(|d| *d != 0.0));
}

#[test]
fn malformed_requests_are_rejected() {
    let spec = benchmark(3, 20);
    let (_, st) = strategy_for(&spec);
    assert!(matches!(simulate_population(&spec, &st, &SimulationOptions::new(0, 1)), Err(PopulationError::Input(_))));
    let mut opts = SimulationOptions::new(2, 1);
    opts.record = Some((3, 0));
    assert!(simulate_population(&spec, &st, &opts).is_err());
    opts.record = None;
    opts.noise_keys = Some(vec![1]);
    assert!(simulate_population(&spec, &st, &opts).is_err());
    let other = benchmark(3, 40);
    assert!(simulate_population(&other, &st, &SimulationOptions::new(2, 1)).is_err());
}

#[test]
fn explosive_dynamics_are_reported() {
    let spec = scalar_spec([0.0, 0.0, 1.0, 0.3, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 1.0, 10);
    let (_, st) = strategy_for(&spec);
    let mut hot = spec.clone();
    hot.types[0].drift = crate::model::TimeFn::Const(crate::model::testing::m1(1e160));
    let err = simulate_population(&hot, &st, &SimulationOptions::new(1, 1)).unwrap_err();
    assert!(matches!(err, PopulationError::NonFinite { path: 0, .. }), "{err}");
}
