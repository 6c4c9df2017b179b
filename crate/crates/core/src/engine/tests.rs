use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::assembly::testing::scalar_system;
use crate::numkit::{shoot_linear_bvp, LinearBvp};
use crate::riccati::solve_direct;

fn solve_all(sys: &LinearFbSystem) -> (RiccatiSolution, OffsetSolution) {
    let ric = solve_direct(sys).unwrap();
    let off = solve_offset(sys, &ric).unwrap();
    (ric, off)
}

fn brownian(rng: &mut ChaCha8Rng, steps: usize, channels: usize, dt: f64) -> Vec<DVector<f64>> {
    (0..steps)
        .map(|_| DVector::from_fn(channels, |_, _| { let g: f64 = StandardNormal.sample(rng); dt.sqrt() * g }))
        .collect()
}

#[test]
fn homogeneous_data_gives_zero_offset() {
    let sys = scalar_system([0.3, -0.2, 0.1, 0.2, 0.5, 0.1, 0.2, 0.1, 0.1], [0.2, 0.4, 0.0, 0.0], 0.0, 1.0, 50);
    let (_, off) = solve_all(&sys);
    assert!(off.psi.values.iter().all(|v| v.amax() == 0.0));
    assert!(off.b_is_zero);
}

#[test]
fn frozen_offset_is_constant() {
    let s = 1.7;
    let sys = scalar_system([0.0; 9], [0.3, 0.0, 0.0, s], 0.0, 1.0, 20);
    let (_, off) = solve_all(&sys);
    assert!(off.psi.values.iter().all(|v| v[0] == s));
    assert!(off.terminal_check <= 1e-12);
}

#[test]
fn offset_terminal_value_is_exact() {
    let (g, p, xi, eta) = (0.3, 0.6, 1.2, -0.4);
    let sys = scalar_system([0.3, -0.2, 0.1, 0.2, 0.5, 0.1, 0.2, 0.1, 0.1], [g, p, xi, eta], 0.3, 1.0, 50);
    let (_, off) = solve_all(&sys);
    assert!((off.psi.last()[0] - (p * xi + eta) / (1.0 - p * g)).abs() <= 1e-12);
}

/// Deterministic two-point problem for the same scalar system, solved by
/// shooting on `(x, y)` directly.
fn shooting_reference(c: [f64; 9], boundary: [f64; 4], horizon: f64, steps: usize) -> TimeGridFn<DVector<f64>> {
    let jac = move |_: StagePoint| DMatrix::from_row_slice(2, 2, &[c[0], c[1], -c[4], -c[3]]);
    let forcing = |_: StagePoint| DVector::zeros(2);
    let bvp = LinearBvp {
        grid: Grid::new(horizon, steps).unwrap(),
        dim_u: 1,
        dim_v: 1,
        jacobian: &jac,
        forcing: &forcing,
        initial: DVector::from_element(1, boundary[2]),
        initial_coupling: DMatrix::from_element(1, 1, boundary[0]),
        terminal_map: DMatrix::from_element(1, 1, boundary[1]),
        terminal_offset: DVector::from_element(1, boundary[3]),
    };
    shoot_linear_bvp(&bvp).unwrap().trajectory
}

#[test]
fn deterministic_solution_matches_shooting() {
    let c = [0.4, -0.6, 0.0, -0.2, 0.7, 0.0, 0.0, 0.0, 0.0];
    let boundary = [0.25, 0.8, 1.5, -0.3];
    let sys = scalar_system(c, boundary, 0.0, 1.0, 1000);
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let det = solve_deterministic(&cl).unwrap();
    let reference = shooting_reference(c, boundary, 1.0, 1000);
    for m in 0..sys.grid.nodes() {
        assert!((det.x.at(m)[0] - reference.at(m)[0]).abs() <= 1e-9, "x at node {m}");
        assert!((det.y.at(m)[0] - reference.at(m)[1]).abs() <= 1e-9, "y at node {m}");
    }
    assert!((off.psi.at(0)[0] - reference.at(0)[1]).abs() <= 1e-6);
    assert!(det.initial_residual <= 1e-12);
    assert!(det.terminal_residual <= 1e-12);
    assert!(det.z.values.iter().all(|z| z[0] == 0.0));
}

#[test]
fn forcing_enters_like_shooting() {
    let c = [0.2, -0.5, 0.0, 0.1, 0.3, 0.0, 0.0, 0.0, 0.0];
    let mut sys = scalar_system(c, [0.1, 0.5, 0.7, 0.2], 0.0, 1.0, 800);
    let fx = |t: f64| DVector::from_element(1, t.sin());
    let fy = |t: f64| DVector::from_element(1, 1.0 - t);
    sys.forcing = Some(crate::assembly::Forcing {
        x: StageTable::from_fn(&sys.grid, |p| fx(p.t)),
        y: StageTable::from_fn(&sys.grid, |p| fy(p.t)),
    });
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let det = solve_deterministic(&cl).unwrap();
    let jac = move |_: StagePoint| DMatrix::from_row_slice(2, 2, &[c[0], c[1], -c[4], -c[3]]);
    let forcing = |p: StagePoint| DVector::from_vec(vec![p.t.sin(), -(1.0 - p.t)]);
    let bvp = LinearBvp {
        grid: sys.grid,
        dim_u: 1,
        dim_v: 1,
        jacobian: &jac,
        forcing: &forcing,
        initial: DVector::from_element(1, 0.7),
        initial_coupling: DMatrix::from_element(1, 1, 0.1),
        terminal_map: DMatrix::from_element(1, 1, 0.5),
        terminal_offset: DVector::from_element(1, 0.2),
    };
    let reference = shoot_linear_bvp(&bvp).unwrap().trajectory;
    for m in 0..sys.grid.nodes() {
        assert!((det.x.at(m)[0] - reference.at(m)[0]).abs() <= 1e-9);
        assert!((det.y.at(m)[0] - reference.at(m)[1]).abs() <= 1e-9);
    }
}

#[test]
fn integrand_vanishes_without_diffusion_sources() {
    let sys = scalar_system([0.3, -0.2, 0.1, 0.2, 0.5, 0.1, 0.0, 0.0, 0.4], [0.2, 0.4, 0.0, 0.3], 0.0, 1.0, 50);
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let p = StagePoint::left(&sys.grid, 10);
    let z = cl.reconstruct_z(p, &DVector::from_element(1, 0.8)).unwrap();
    assert_eq!(z[0], 0.0);
}

#[test]
fn integrand_is_linear_in_additive_noise() {
    let c = [0.3, -0.2, 0.0, 0.2, 0.5, 0.0, 0.0, 0.0, 0.4];
    let z_for = |s0| {
        let sys = scalar_system(c, [0.0, 0.4, 0.0, 0.0], s0, 1.0, 50);
        let (ric, off) = solve_all(&sys);
        let cl = ClosedLoop::new(&sys, &ric, &off);
        cl.reconstruct_z(StagePoint::left(&sys.grid, 5), &DVector::zeros(1)).unwrap()[0]
    };
    let (z1, z2) = (z_for(0.3), z_for(0.6));
    assert!(z1 != 0.0);
    assert!((z2 - 2.0 * z1).abs() <= 1e-14);
}

#[test]
fn integrand_matches_martingale_regression() {
    // Additive noise only: the increment of y = φ x̃ + ψ over a cell,
    // regressed on the Brownian increment, estimates z.
    let c = [0.2, 0.0, 0.0, 0.1, 0.6, 0.0, 0.0, 0.0, 0.0];
    let sys = scalar_system(c, [0.0, 0.5, 1.0, 0.0], 0.4, 1.0, 100);
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let maps = cl.node_maps().unwrap();
    let dt = sys.grid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cell = 40;
    let paths = 4000;
    let mut samples = Vec::with_capacity(paths);
    for _ in 0..paths {
        let noise = brownian(&mut rng, 100, 1, dt);
        let path = simulate_decoupled(&cl, &maps, &noise).unwrap();
        samples.push((path.y[cell + 1][0] - path.y[cell][0], noise[cell][0], path.z[cell][0]));
    }
    let n = paths as f64;
    let est: Vec<f64> = samples.iter().map(|(dy, dw, _)| dy * dw / dt).collect();
    let mean = est.iter().sum::<f64>() / n;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = samples[0].2;
    assert!((mean - z).abs() <= 3.0 * (var / n).sqrt() + 1e-3, "estimate {mean} vs z {z}");
}

#[test]
fn zero_noise_paths_are_deterministic() {
    let c = [0.3, -0.2, 0.1, 0.2, 0.5, 0.1, 0.2, 0.1, 0.1];
    let sys = scalar_system(c, [0.2, 0.4, 1.0, 0.3], 0.5, 1.0, 64);
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let maps = cl.node_maps().unwrap();
    let zero = vec![DVector::zeros(1); 64];
    let a = simulate_decoupled(&cl, &maps, &zero).unwrap();
    let b = simulate_decoupled(&cl, &maps, &zero).unwrap();
    assert_eq!(a, b);
    assert!(a.initial_residual <= 1e-10);
    assert_eq!(a.xtilde[0].amax(), 0.0);
}

#[test]
fn terminal_residual_is_first_order() {
    let c = [0.3, -0.2, 0.1, 0.2, 0.5, 0.1, 0.2, 0.1, 0.1];
    let residual = |steps| {
        let sys = scalar_system(c, [0.2, 0.4, 1.0, 0.3], 0.5, 1.0, steps);
        let (ric, off) = solve_all(&sys);
        let cl = ClosedLoop::new(&sys, &ric, &off);
        let maps = cl.node_maps().unwrap();
        simulate_decoupled(&cl, &maps, &vec![DVector::zeros(1); steps]).unwrap().terminal_residual
    };
    let (r1, r2) = (residual(100), residual(200));
    let ratio = r1 / r2;
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn monte_carlo_mean_matches_deterministic_solution() {
    let c = [0.3, -0.2, 0.1, 0.2, 0.5, 0.1, 0.2, 0.1, 0.1];
    let steps = 200;
    let sys = scalar_system(c, [0.2, 0.4, 1.0, 0.3], 0.5, 1.0, steps);
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let maps = cl.node_maps().unwrap();
    let det = solve_deterministic(&cl).unwrap();
    let euler = simulate_decoupled(&cl, &maps, &vec![DVector::zeros(1); steps]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let paths = 2000;
    let finals: Vec<f64> = (0..paths)
        .map(|_| simulate_decoupled(&cl, &maps, &brownian(&mut rng, steps, 1, sys.grid.dt())).unwrap().x[steps][0])
        .collect();
    let n = paths as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let se = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    // The Euler mean equals the zero-noise Euler path; it differs from the
    // RK4 solution by O(dt).
    let bias = (euler.x[steps][0] - det.x.last()[0]).abs();
    assert!((mean - det.x.last()[0]).abs() <= 3.0 * se + bias, "mean {mean}, ode {}, se {se}", det.x.last()[0]);
}

#[test]
fn rejects_malformed_noise() {
    let sys = scalar_system([0.0; 9], [0.0; 4], 0.0, 1.0, 4);
    let (ric, off) = solve_all(&sys);
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let maps = cl.node_maps().unwrap();
    assert!(matches!(simulate_decoupled(&cl, &maps, &[DVector::zeros(1)]), Err(EngineError::Noise(_))));
}
