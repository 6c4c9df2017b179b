//! Path-by-path Euler–Maruyama simulation of the population.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::strategy::StrategyField;
use super::{CostParts, Direction, PopulationError, RecordedPath};
use crate::model::ModelSpec;

/// A dense matrix stored row-major for allocation-free products.
#[derive(Clone, Debug)]
struct Flat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Flat {
    fn new(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        Self { rows, cols, data: (0..rows).flat_map(|i| (0..cols).map(move |j| m[(i, j)])).collect() }
    }

    /// `out += s · M x`.
    #[inline]
    fn mul_add(&self, x: &[f64], s: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o += s * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `xᵀ M x`.
    #[inline]
    fn quad(&self, x: &[f64]) -> f64 {
        (0..self.rows)
            .map(|i| x[i] * self.data[i * self.cols..(i + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

/// Coefficients of the real population on one cell.
struct CellData {
    drift: Vec<Flat>,
    weight: Vec<Flat>,
    sigma: Vec<Vec<f64>>,
    control_drift: Flat,
    mean_field: Flat,
    control_diffusion: Flat,
    backward_control: Flat,
    backward_state: Flat,
    backward_mean: Flat,
    state_weight: Flat,
    tracking: Flat,
}

/// Perturbation `u ↦ u + scale · δu` applied to the real population.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    /// Index into the direction list, `None` for the unperturbed strategy.
    pub direction: Option<usize>,
    /// Multiplier of the direction.
    pub scale: f64,
}

impl Variant {
    /// The unperturbed strategy.
    pub const BASE: Variant = Variant { direction: None, scale: 0.0 };
}

/// Per-variant, per-agent accumulations along one path.
pub(crate) struct Integrated {
    /// `[variant][agent]` running cost parts (initial part left at zero).
    pub parts: Vec<Vec<CostParts>>,
    /// `[variant][agent]` backward-state functional at time zero.
    pub y0: Vec<Vec<DVector<f64>>>,
    /// Population mean of the unperturbed run on every node.
    pub xbar: Vec<DVector<f64>>,
    pub recorded: Option<RecordedPath>,
}

/// Everything the path loop needs, prepared once per run.
pub(crate) struct Simulator<'a> {
    strategy: &'a StrategyField,
    directions: &'a [Direction],
    theta: Vec<usize>,
    n: usize,
    d: usize,
    steps: usize,
    dt: f64,
    cells: Vec<CellData>,
    /// `[type][node]` propagator of the backward drift.
    propagator: Vec<Vec<Flat>>,
    terminal_map: Flat,
    eta: Vec<Vec<f64>>,
    xi: Vec<Vec<f64>>,
    spread: Vec<Option<Vec<f64>>>,
    initial_weight: Flat,
    random: bool,
    keys: Vec<u64>,
}

/// Seed of the generator owned by `(path, agent key)` under a run seed.
pub fn path_agent_seed(seed: u64, path: u64, key: u64) -> [u8; 32] {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&path.to_le_bytes());
    s[16..24].copy_from_slice(&key.to_le_bytes());
    s[24..].copy_from_slice(b"mflqpath");
    s
}

impl<'a> Simulator<'a> {
    pub fn new(
        spec: &ModelSpec,
        strategy: &'a StrategyField,
        directions: &'a [Direction],
        keys: Option<&[u64]>,
    ) -> Result<Self, PopulationError> {
        let n = spec.dims.state;
        let d = spec.dims.control;
        let steps = spec.grid.steps();
        let dt = spec.grid.dt();
        let agents = spec.dims.agents;
        let random = spec.has_random_initial();
        if strategy.types.len() != spec.dims.types || strategy.n != n || strategy.d != d {
            return Err(PopulationError::Input("strategy does not match the model dimensions".into()));
        }
        if random && strategy.initial_dirs() != n {
            return Err(PopulationError::Input("strategy lacks initial-state responses for random initial states".into()));
        }
        if strategy.types.iter().any(|t| t.laws.len() != steps + 1) {
            return Err(PopulationError::Input("strategy grid does not match the model grid".into()));
        }
        for (j, dir) in directions.iter().enumerate() {
            if dir.values.len() != agents * steps * d {
                return Err(PopulationError::Input(format!("direction {j} has {} values, expected {}", dir.values.len(), agents * steps * d)));
            }
        }
        let keys = match keys {
            Some(k) if k.len() == agents => k.to_vec(),
            Some(k) => return Err(PopulationError::Input(format!("{} noise keys for {agents} agents", k.len()))),
            None => (0..agents as u64).collect(),
        };
        let sh = &spec.shared;
        let cells = (0..steps)
            .map(|c| CellData {
                drift: spec.types.iter().map(|t| Flat::new(t.drift.at_cell(c))).collect(),
                weight: spec.types.iter().map(|t| Flat::new(t.control_weight.at_cell(c))).collect(),
                sigma: spec.types.iter().map(|t| t.diffusion.at_cell(c).as_slice().to_vec()).collect(),
                control_drift: Flat::new(sh.control_drift.at_cell(c)),
                mean_field: Flat::new(sh.mean_field_drift.at_cell(c)),
                control_diffusion: Flat::new(sh.control_diffusion.at_cell(c)),
                backward_control: Flat::new(sh.backward_control.at_cell(c)),
                backward_state: Flat::new(sh.backward_state.at_cell(c)),
                backward_mean: Flat::new(sh.backward_mean_field.at_cell(c)),
                state_weight: Flat::new(sh.state_weight.at_cell(c)),
                tracking: Flat::new(sh.tracking.at_cell(c)),
            })
            .collect();
        let propagator = spec
            .types
            .iter()
            .map(|t| {
                let mut g = DMatrix::<f64>::identity(n, n);
                let mut out = vec![Flat::new(&g)];
                for c in 0..steps {
                    g = &g * (DMatrix::identity(n, n) + t.backward_drift.at_cell(c) * dt);
                    out.push(Flat::new(&g));
                }
                out
            })
            .collect();
        Ok(Self {
            strategy,
            directions,
            theta: spec.population.theta.clone(),
            n,
            d,
            steps,
            dt,
            cells,
            propagator,
            terminal_map: Flat::new(&sh.terminal_map),
            eta: spec.types.iter().map(|t| t.terminal_offset.as_slice().to_vec()).collect(),
            xi: spec.types.iter().map(|t| t.initial_state.as_slice().to_vec()).collect(),
            spread: spec.types.iter().map(|t| t.initial_spread.as_ref().map(|s| s.as_slice().to_vec())).collect(),
            initial_weight: Flat::new(&sh.initial_weight),
            random,
            keys,
        })
    }

    pub fn agents(&self) -> usize {
        self.theta.len()
    }

    pub fn is_random(&self) -> bool {
        self.random
    }

    /// `½ ⟨Γ y, y⟩`.
    pub fn initial_cost(&self, y0: &DVector<f64>) -> f64 {
        0.5 * self.initial_weight.quad(y0.as_slice())
    }

    /// Initial-state deviations and Brownian increments of one path,
    /// `(deviations[agent·n + j], increments[agent·steps + m])`.
    pub fn draw(&self, seed: u64, path: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, steps) = (self.n, self.steps);
        let agents = self.agents();
        let mut dev = vec![0.0; if self.random { agents * n } else { 0 }];
        let mut inc = vec![0.0; agents * steps];
        let sd = self.dt.sqrt();
        for i in 0..agents {
            let mut rng = ChaCha8Rng::from_seed(path_agent_seed(seed, path as u64, self.keys[i]));
            if self.random {
                if let Some(spread) = &self.spread[self.theta[i]] {
                    for j in 0..n {
                        let z = loop {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            if g.abs() <= 3.0 {
                                break g;
                            }
                        };
                        dev[i * n + j] = spread[j] * z;
                    }
                }
            }
            for m in 0..steps {
                let g: f64 = StandardNormal.sample(&mut rng);
                inc[i * steps + m] = sd * g;
            }
        }
        (dev, inc)
    }

    /// Integrates the auxiliary systems and every variant of the real
    /// population along one path. Zero increments give the conditional
    /// mean given the initial states.
    pub fn integrate(
        &self,
        variants: &[Variant],
        dev: &[f64],
        inc: Option<&[f64]>,
        path: usize,
        record: Option<usize>,
    ) -> Result<Integrated, PopulationError> {
        let (n, d, steps, dt) = (self.n, self.d, self.steps, self.dt);
        let s = 2 * n;
        let agents = self.agents();
        let nv = variants.len();
        let inv_n = 1.0 / agents as f64;
        let delta = |i: usize| if self.random { &dev[i * n..(i + 1) * n] } else { &dev[0..0] };

        let mut aux = vec![0.0; agents * s];
        let mut real = vec![0.0; nv * agents * n];
        for v in 0..nv {
            for i in 0..agents {
                let x = &mut real[(v * agents + i) * n..(v * agents + i + 1) * n];
                x.copy_from_slice(&self.xi[self.theta[i]]);
                for (xj, dj) in x.iter_mut().zip(delta(i)) {
                    *xj += dj;
                }
            }
        }
        let mut parts = vec![vec![CostParts::default(); agents]; nv];
        let mut y0 = vec![0.0; nv * agents * n];
        let mut xbar = vec![0.0; nv * n];
        let mut xbar_path = Vec::with_capacity(steps + 1);
        let mut u = vec![0.0; agents * d];
        let mut uv = vec![0.0; d];
        let mut e = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut dx = vec![0.0; n];
        let mut noise = vec![0.0; n];
        let mut drift = vec![0.0; s];
        let mut diff = vec![0.0; s];
        let mut rec = record.map(|agent| RecordedPath { agent, path, ..RecordedPath::default() });

        for m in 0..=steps {
            for v in 0..nv {
                let xb = &mut xbar[v * n..(v + 1) * n];
                xb.fill(0.0);
                for i in 0..agents {
                    for (b, x) in xb.iter_mut().zip(&real[(v * agents + i) * n..(v * agents + i + 1) * n]) {
                        *b += x;
                    }
                }
                xb.iter_mut().for_each(|b| *b *= inv_n);
            }
            if let Some(j) = xbar.iter().position(|x| !x.is_finite()) {
                let agent = (0..agents).find(|&i| real[i * n..(i + 1) * n].iter().any(|x| !x.is_finite())).unwrap_or(j / n);
                return Err(PopulationError::NonFinite { agent: agent + 1, path, node: m });
            }
            xbar_path.push(DVector::from_column_slice(&xbar[..n]));
            for i in 0..agents {
                let k = self.theta[i];
                let law = &self.strategy.types[k].laws[m].control;
                law.apply(&aux[i * s..(i + 1) * s], delta(i), &mut u[i * d..(i + 1) * d]);
            }
            if let Some(r) = rec.as_mut() {
                let i = r.agent;
                let xt = DVector::from_column_slice(&aux[i * s..(i + 1) * s]);
                let mut x_aux = xt.rows(0, n).into_owned();
                for j in 0..n {
                    x_aux[j] += self.xi[self.theta[i]][j] + delta(i).get(j).copied().unwrap_or(0.0);
                }
                r.aux_state.push(x_aux);
                r.aux_transformed.push(xt);
                r.real_state.push(DVector::from_column_slice(&real[i * n..(i + 1) * n]));
                r.control.push(DVector::from_column_slice(&u[i * d..(i + 1) * d]));
            }
            if m == steps {
                for v in 0..nv {
                    for i in 0..agents {
                        let k = self.theta[i];
                        let x = &real[(v * agents + i) * n..(v * agents + i + 1) * n];
                        f.copy_from_slice(&self.eta[k]);
                        self.terminal_map.mul_add(x, 1.0, &mut f);
                        self.propagator[k][m].mul_add(&f, 1.0, &mut y0[(v * agents + i) * n..(v * agents + i + 1) * n]);
                    }
                }
                break;
            }
            let c = &self.cells[m];
            for (v, var) in variants.iter().enumerate() {
                let xb = &xbar[v * n..(v + 1) * n];
                for i in 0..agents {
                    let k = self.theta[i];
                    uv.copy_from_slice(&u[i * d..(i + 1) * d]);
                    if let Some(dir) = var.direction {
                        let du = &self.directions[dir].values[(i * steps + m) * d..(i * steps + m + 1) * d];
                        for (a, b) in uv.iter_mut().zip(du) {
                            *a += var.scale * b;
                        }
                    }
                    let idx = (v * agents + i) * n;
                    let x = &mut real[idx..idx + n];
                    e.copy_from_slice(x);
                    c.tracking.mul_add(xb, -1.0, &mut e);
                    let p = &mut parts[v][i];
                    p.state += 0.5 * dt * c.state_weight.quad(&e);
                    p.control += 0.5 * dt * c.weight[k].quad(&uv);
                    f.fill(0.0);
                    c.backward_control.mul_add(&uv, 1.0, &mut f);
                    c.backward_state.mul_add(x, 1.0, &mut f);
                    c.backward_mean.mul_add(xb, 1.0, &mut f);
                    self.propagator[k][m].mul_add(&f, dt, &mut y0[idx..idx + n]);
                    dx.fill(0.0);
                    c.drift[k].mul_add(x, 1.0, &mut dx);
                    c.control_drift.mul_add(&uv, 1.0, &mut dx);
                    c.mean_field.mul_add(xb, 1.0, &mut dx);
                    let w = inc.map_or(0.0, |inc| inc[i * steps + m]);
                    noise.copy_from_slice(&c.sigma[k]);
                    c.control_diffusion.mul_add(&uv, 1.0, &mut noise);
                    for j in 0..n {
                        x[j] += dx[j] * dt + noise[j] * w;
                    }
                }
            }
            for i in 0..agents {
                let law = &self.strategy.types[self.theta[i]].laws[m];
                let xt = &mut aux[i * s..(i + 1) * s];
                law.drift.apply(xt, delta(i), &mut drift);
                law.diffusion.apply(xt, delta(i), &mut diff);
                let w = inc.map_or(0.0, |inc| inc[i * steps + m]);
                for j in 0..s {
                    xt[j] += drift[j] * dt + diff[j] * w;
                }
                if xt.iter().any(|x| !x.is_finite()) {
                    return Err(PopulationError::NonFinite { agent: i + 1, path, node: m + 1 });
                }
            }
        }
        let y0 = (0..nv)
            .map(|v| (0..agents).map(|i| DVector::from_column_slice(&y0[(v * agents + i) * n..(v * agents + i + 1) * n])).collect())
            .collect();
        Ok(Integrated { parts, y0, xbar: xbar_path, recorded: rec })
    }
}
