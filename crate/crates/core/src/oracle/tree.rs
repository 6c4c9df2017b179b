//! Exact social optimum on a binary scenario tree.
//!
//! Every agent's Brownian increment over a cell is `±√dt` with equal
//! probability, so level `m` of the tree has `2^{N m}` nodes. Controls are
//! free variables on every node below the leaves. States and the backward
//! values at time zero are affine in the controls, so the social cost is a
//! convex quadratic; its minimizer is found by preconditioned conjugate
//! gradients with the gradient computed by an adjoint sweep over the tree.

use nalgebra::{DMatrix, DVector};

use super::OracleError;
use crate::model::ModelSpec;
use crate::numkit::solve_linear;
use crate::population::StrategyField;

/// Largest number of grid cells accepted.
pub const MAX_TREE_STEPS: usize = 6;
/// Largest number of agents accepted.
pub const MAX_TREE_AGENTS: usize = 3;
/// Largest number of leaves accepted.
pub const MAX_TREE_LEAVES: usize = 1 << 18;

/// Relative residual at which conjugate gradients stop.
const CG_TOLERANCE: f64 = 1e-13;
/// Curvature below this multiple of the preconditioner norm is treated as
/// a loss of definiteness.
const CURVATURE_FLOOR: f64 = 1e-12;

/// Coefficients of one grid cell.
struct Cell {
    drift: Vec<DMatrix<f64>>,
    sigma: Vec<DVector<f64>>,
    weight: Vec<DMatrix<f64>>,
    weight_inv: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    dm: DMatrix<f64>,
    f: DMatrix<f64>,
    kc: DMatrix<f64>,
    l: DMatrix<f64>,
    m: DMatrix<f64>,
    q: DMatrix<f64>,
    s: DMatrix<f64>,
}

/// The tree discretization of one model instance.
pub struct ScenarioTree {
    agents: usize,
    n: usize,
    d: usize,
    steps: usize,
    dt: f64,
    theta: Vec<usize>,
    cells: Vec<Cell>,
    /// `[type][node]` propagator of the backward drift.
    propagator: Vec<Vec<DMatrix<f64>>>,
    xi: Vec<DVector<f64>>,
    eta: Vec<DVector<f64>>,
    terminal_map: DMatrix<f64>,
    initial_weight: DMatrix<f64>,
    /// First node index of every level.
    offsets: Vec<usize>,
}

/// Result of [`ScenarioTree::solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct TreeOptimum {
    /// Optimal controls, laid out as [`ScenarioTree::index`].
    pub controls: Vec<f64>,
    /// Optimal social cost.
    pub cost: f64,
    /// `‖H u + g‖ / ‖g‖` of the normal equations at the returned controls.
    pub residual: f64,
    /// Conjugate-gradient iterations.
    pub iterations: usize,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl ScenarioTree {
    /// Builds the tree of `spec`, which must have deterministic initial data
    /// and fit the size bounds.
    pub fn new(spec: &ModelSpec) -> Result<Self, OracleError> {
        let agents = spec.dims.agents;
        let steps = spec.grid.steps();
        if steps > MAX_TREE_STEPS || agents > MAX_TREE_AGENTS || agents * steps > 18 {
            return Err(OracleError::TooLarge { agents, steps, limit: MAX_TREE_LEAVES });
        }
        if spec.has_random_initial() {
            return Err(OracleError::Restriction("the scenario tree needs deterministic initial states".into()));
        }
        let n = spec.dims.state;
        let d = spec.dims.control;
        let dt = spec.grid.dt();
        let sh = &spec.shared;
        let cells = (0..steps)
            .map(|c| {
                let weight: Vec<DMatrix<f64>> = spec.types.iter().map(|t| sym(t.control_weight.at_cell(c))).collect();
                let weight_inv = weight
                    .iter()
                    .map(|r| solve_linear(r, &DMatrix::identity(d, d), "control weight").map(|s| s.x))
                    .collect::<Result<_, _>>()?;
                Ok(Cell {
                    drift: spec.types.iter().map(|t| t.drift.at_cell(c).clone()).collect(),
                    sigma: spec.types.iter().map(|t| t.diffusion.at_cell(c).clone()).collect(),
                    weight,
                    weight_inv,
                    b: sh.control_drift.at_cell(c).clone(),
                    dm: sh.control_diffusion.at_cell(c).clone(),
                    f: sh.mean_field_drift.at_cell(c).clone(),
                    kc: sh.backward_control.at_cell(c).clone(),
                    l: sh.backward_state.at_cell(c).clone(),
                    m: sh.backward_mean_field.at_cell(c).clone(),
                    q: sym(sh.state_weight.at_cell(c)),
                    s: sh.tracking.at_cell(c).clone(),
                })
            })
            .collect::<Result<_, crate::numkit::NumError>>()?;
        let propagator = spec
            .types
            .iter()
            .map(|t| {
                let mut g = DMatrix::identity(n, n);
                let mut out = vec![g.clone()];
                for c in 0..steps {
                    g = &g * (DMatrix::identity(n, n) + t.backward_drift.at_cell(c) * dt);
                    out.push(g.clone());
                }
                out
            })
            .collect();
        let mut offsets = vec![0];
        for m in 0..=steps {
            offsets.push(offsets[m] + (1usize << (agents * m)));
        }
        Ok(Self {
            agents,
            n,
            d,
            steps,
            dt,
            theta: spec.population.theta.clone(),
            cells,
            propagator,
            xi: spec.types.iter().map(|t| t.initial_state.clone()).collect(),
            eta: spec.types.iter().map(|t| t.terminal_offset.clone()).collect(),
            terminal_map: spec.shared.terminal_map.clone(),
            initial_weight: sym(&spec.shared.initial_weight),
            offsets,
        })
    }

    /// Number of control variables.
    pub fn variables(&self) -> usize {
        self.offsets[self.steps] * self.agents * self.d
    }

    /// Number of leaves.
    pub fn leaves(&self) -> usize {
        1 << (self.agents * self.steps)
    }

    /// Position of control coordinate `j` of agent `i` at node `s` of level
    /// `m` in the control vector.
    pub fn index(&self, m: usize, s: usize, i: usize, j: usize) -> usize {
        ((self.offsets[m] + s) * self.agents + i) * self.d + j
    }

    /// Number of nodes on level `m`.
    pub fn nodes(&self, m: usize) -> usize {
        1 << (self.agents * m)
    }

    fn increment(&self, branch: usize, i: usize) -> f64 {
        if branch >> i & 1 == 1 {
            self.dt.sqrt()
        } else {
            -self.dt.sqrt()
        }
    }

    fn control(&self, u: &[f64], m: usize, s: usize, i: usize) -> DVector<f64> {
        let at = self.index(m, s, i, 0);
        DVector::from_column_slice(&u[at..at + self.d])
    }

    fn mean(xs: &[DVector<f64>]) -> DVector<f64> {
        xs.iter().fold(DVector::zeros(xs[0].len()), |a, x| a + x) / xs.len() as f64
    }

    /// States on every node, `[level][node · N + agent]`.
    fn states(&self, u: &[f64], homogeneous: bool) -> Vec<Vec<DVector<f64>>> {
        let (na, branches) = (self.agents, 1usize << self.agents);
        let mut levels = vec![(0..na)
            .map(|i| if homogeneous { DVector::zeros(self.n) } else { self.xi[self.theta[i]].clone() })
            .collect::<Vec<_>>()];
        for m in 0..self.steps {
            let c = &self.cells[m];
            let cur = &levels[m];
            let mut next = Vec::with_capacity(cur.len() * branches);
            for s in 0..self.nodes(m) {
                let xs = &cur[s * na..(s + 1) * na];
                let xbar = Self::mean(xs);
                let parts: Vec<(DVector<f64>, DVector<f64>)> = (0..na)
                    .map(|i| {
                        let k = self.theta[i];
                        let u = self.control(u, m, s, i);
                        let drift = &xs[i] + (&c.drift[k] * &xs[i] + &c.b * &u + &c.f * &xbar) * self.dt;
                        let mut vol = &c.dm * &u;
                        if !homogeneous {
                            vol += &c.sigma[k];
                        }
                        (drift, vol)
                    })
                    .collect();
                for b in 0..branches {
                    for (i, (drift, vol)) in parts.iter().enumerate() {
                        next.push(drift + vol * self.increment(b, i));
                    }
                }
            }
            levels.push(next);
        }
        levels
    }

    /// Running cost and time-zero backward values.
    fn evaluate(&self, u: &[f64], levels: &[Vec<DVector<f64>>], homogeneous: bool) -> (f64, Vec<DVector<f64>>) {
        let na = self.agents;
        let mut running = 0.0;
        let mut y0 = vec![DVector::zeros(self.n); na];
        for m in 0..self.steps {
            let c = &self.cells[m];
            let prob = 1.0 / self.nodes(m) as f64;
            for s in 0..self.nodes(m) {
                let xs = &levels[m][s * na..(s + 1) * na];
                let xbar = Self::mean(xs);
                for i in 0..na {
                    let k = self.theta[i];
                    let u = self.control(u, m, s, i);
                    let e = &xs[i] - &c.s * &xbar;
                    running += prob * 0.5 * self.dt * (e.dot(&(&c.q * &e)) + u.dot(&(&c.weight[k] * &u)));
                    y0[i] += &self.propagator[k][m] * (&c.kc * &u + &c.l * &xs[i] + &c.m * &xbar) * (prob * self.dt);
                }
            }
        }
        let prob = 1.0 / self.leaves() as f64;
        for s in 0..self.leaves() {
            for i in 0..na {
                let k = self.theta[i];
                let mut terminal = &self.terminal_map * &levels[self.steps][s * na + i];
                if !homogeneous {
                    terminal += &self.eta[k];
                }
                y0[i] += &self.propagator[k][self.steps] * terminal * prob;
            }
        }
        (running, y0)
    }

    /// Social cost of the controls `u`.
    pub fn cost(&self, u: &[f64]) -> f64 {
        let levels = self.states(u, false);
        let (running, y0) = self.evaluate(u, &levels, false);
        running + y0.iter().map(|y| 0.5 * y.dot(&(&self.initial_weight * y))).sum::<f64>()
    }

    /// Gradient of the social cost; with `homogeneous` the additive data are
    /// dropped, which yields the Hessian applied to `u`.
    pub fn gradient(&self, u: &[f64], homogeneous: bool) -> Vec<f64> {
        let (na, branches) = (self.agents, 1usize << self.agents);
        let inv_n = 1.0 / na as f64;
        let levels = self.states(u, homogeneous);
        let (_, y0) = self.evaluate(u, &levels, homogeneous);
        let lambda: Vec<DVector<f64>> = y0.iter().map(|y| &self.initial_weight * y).collect();
        let mut grad = vec![0.0; self.variables()];
        let prob_leaf = 1.0 / self.leaves() as f64;
        let mut adj: Vec<DVector<f64>> = (0..self.leaves() * na)
            .map(|idx| {
                let k = self.theta[idx % na];
                self.terminal_map.transpose() * (self.propagator[k][self.steps].transpose() * &lambda[idx % na]) * prob_leaf
            })
            .collect();
        for m in (0..self.steps).rev() {
            let c = &self.cells[m];
            let prob = 1.0 / self.nodes(m) as f64;
            let mut cur = Vec::with_capacity(self.nodes(m) * na);
            for s in 0..self.nodes(m) {
                let xs = &levels[m][s * na..(s + 1) * na];
                let xbar = Self::mean(xs);
                let mut sum = vec![DVector::zeros(self.n); na];
                let mut weighted = vec![DVector::zeros(self.n); na];
                for b in 0..branches {
                    for i in 0..na {
                        let p = &adj[(s * branches + b) * na + i];
                        sum[i] += p;
                        weighted[i] += p * self.increment(b, i);
                    }
                }
                let total = sum.iter().fold(DVector::zeros(self.n), |a, p| a + p);
                let errs: Vec<DVector<f64>> = xs.iter().map(|x| &c.q * (x - &c.s * &xbar)).collect();
                let err_sum = errs.iter().fold(DVector::zeros(self.n), |a, e| a + e);
                let back_sum = (0..na)
                    .map(|j| self.propagator[self.theta[j]][m].transpose() * &lambda[j])
                    .fold(DVector::zeros(self.n), |a, v| a + v);
                for i in 0..na {
                    let k = self.theta[i];
                    let u = self.control(u, m, s, i);
                    let back = self.propagator[k][m].transpose() * &lambda[i];
                    let gu = (&c.weight[k] * &u + c.kc.transpose() * &back) * (prob * self.dt)
                        + c.b.transpose() * &sum[i] * self.dt
                        + c.dm.transpose() * &weighted[i];
                    let at = self.index(m, s, i, 0);
                    grad[at..at + self.d].copy_from_slice(gu.as_slice());
                    let local = &errs[i] - c.s.transpose() * &err_sum * inv_n
                        + c.l.transpose() * &back
                        + c.m.transpose() * &back_sum * inv_n;
                    let carried = &sum[i] + c.drift[k].transpose() * &sum[i] * self.dt + c.f.transpose() * &total * (self.dt * inv_n);
                    cur.push(local * (prob * self.dt) + carried);
                }
            }
            adj = cur;
        }
        grad
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; r.len()];
        for m in 0..self.steps {
            let scale = self.nodes(m) as f64 / self.dt;
            for s in 0..self.nodes(m) {
                for i in 0..self.agents {
                    let at = self.index(m, s, i, 0);
                    let v = &self.cells[m].weight_inv[self.theta[i]] * DVector::from_column_slice(&r[at..at + self.d]) * scale;
                    z[at..at + self.d].copy_from_slice(v.as_slice());
                }
            }
        }
        z
    }

    /// Minimizes the social cost over all adapted controls.
    pub fn solve(&self) -> Result<TreeOptimum, OracleError> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let nvar = self.variables();
        let zero = vec![0.0; nvar];
        let g = self.gradient(&zero, false);
        let gnorm = dot(&g, &g).sqrt();
        let mut u = zero;
        let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut iterations = 0;
        if gnorm > 0.0 {
            let mut z = self.precondition(&r);
            let mut p = z.clone();
            let mut rz = dot(&r, &z);
            let limit = 20 * nvar + 100;
            while iterations < limit {
                iterations += 1;
                let hp = self.gradient(&p, true);
                let curvature = dot(&p, &hp);
                let scale = dot(&p, &p);
                if !(curvature > CURVATURE_FLOOR * scale * self.min_weight()) {
                    return Err(OracleError::NotPositiveDefinite { curvature: curvature / scale });
                }
                let alpha = rz / curvature;
                for j in 0..nvar {
                    u[j] += alpha * p[j];
                    r[j] -= alpha * hp[j];
                }
                if dot(&r, &r).sqrt() <= CG_TOLERANCE * gnorm {
                    break;
                }
                z = self.precondition(&r);
                let rz_next = dot(&r, &z);
                let beta = rz_next / rz;
                rz = rz_next;
                for j in 0..nvar {
                    p[j] = z[j] + beta * p[j];
                }
            }
        }
        let check = self.gradient(&u, false);
        let residual = if gnorm > 0.0 { dot(&check, &check).sqrt() / gnorm } else { 0.0 };
        if !(residual <= 1e-10) {
            return Err(OracleError::NoConvergence { iterations, residual });
        }
        Ok(TreeOptimum { cost: self.cost(&u), controls: u, residual, iterations })
    }

    /// Smallest curvature scale of the running control cost, `dt · λ_min(R)
    /// / leaves`.
    fn min_weight(&self) -> f64 {
        let lmin = self
            .cells
            .iter()
            .flat_map(|c| c.weight.iter())
            .map(|r| r.clone().symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min);
        lmin * self.dt / self.nodes(self.steps.saturating_sub(1)) as f64
    }

    /// Controls generated on the tree by decentralized feedback laws built on
    /// the same grid.
    pub fn strategy_controls(&self, strategy: &StrategyField) -> Result<Vec<f64>, OracleError> {
        if strategy.types.iter().any(|t| t.laws.len() != self.steps + 1) || strategy.initial_dirs() != 0 {
            return Err(OracleError::Restriction("strategy does not match the tree grid".into()));
        }
        let (na, branches) = (self.agents, 1usize << self.agents);
        let sdim = 2 * self.n;
        let mut u = vec![0.0; self.variables()];
        let mut aux = vec![vec![0.0; sdim]; na];
        let mut drift = vec![0.0; sdim];
        let mut diff = vec![0.0; sdim];
        for m in 0..self.steps {
            let mut next = Vec::with_capacity(aux.len() * branches);
            for s in 0..self.nodes(m) {
                let mut moved = Vec::with_capacity(na);
                for i in 0..na {
                    let law = &strategy.types[self.theta[i]].laws[m];
                    let xt = &aux[s * na + i];
                    let at = self.index(m, s, i, 0);
                    law.control.apply(xt, &[], &mut u[at..at + self.d]);
                    law.drift.apply(xt, &[], &mut drift);
                    law.diffusion.apply(xt, &[], &mut diff);
                    let base: Vec<f64> = xt.iter().zip(&drift).map(|(x, f)| x + f * self.dt).collect();
                    moved.push((base, diff.clone()));
                }
                for b in 0..branches {
                    for (i, (base, vol)) in moved.iter().enumerate() {
                        let w = self.increment(b, i);
                        next.push(base.iter().zip(vol).map(|(x, v)| x + v * w).collect());
                    }
                }
            }
            aux = next;
        }
        Ok(u)
    }

    /// Brownian increments of every leaf path, `[leaf][agent · steps + m]`.
    pub fn leaf_increments(&self) -> Vec<Vec<f64>> {
        let na = self.agents;
        (0..self.leaves())
            .map(|leaf| {
                let mut inc = vec![0.0; na * self.steps];
                for m in 0..self.steps {
                    let branch = (leaf >> (na * (self.steps - 1 - m))) & ((1 << na) - 1);
                    for i in 0..na {
                        inc[i * self.steps + m] = self.increment(branch, i);
                    }
                }
                inc
            })
            .collect()
    }
}
