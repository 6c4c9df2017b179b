//! Problem instances: coefficients, agent population, horizon and grid.
//!
//! A [`ModelSpec`] is immutable once built. [`ModelSpec::new`] checks shapes
//! and table lengths; [`validate`] checks the standing assumptions (positive
//! definite control weights, semidefinite state and initial weights, a
//! well-formed type distribution) and reports violations instead of failing.

mod config;
mod timefn;
mod validate;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use config::{emit, emit_string, parse, parse_str};
pub use timefn::{combine, Grid, MatFn, TimeFn, VecFn};
pub use validate::{validate, ValidationReport, Violation};

/// Errors raised while building, parsing or querying a model.
#[derive(Debug, Error)]
pub enum ModelError {
    /// Malformed configuration text or structure.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    /// A coefficient has the wrong shape or table length.
    #[error("shape error in {name}: {message}")]
    Shape { name: String, message: String },
    /// Invalid grid parameters.
    #[error("grid error: {0}")]
    Grid(String),
    /// Inconsistent population description.
    #[error("population error: {0}")]
    Population(String),
    /// Unknown coefficient name in a query.
    #[error("unknown coefficient `{0}`")]
    UnknownCoefficient(String),
    /// Query time outside `[0, T]`.
    #[error("time {t} outside the horizon [0, {horizon}]")]
    Horizon { t: f64, horizon: f64 },
}

/// Problem dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Dimension of the forward state (the backward state has the same size).
    pub state: usize,
    /// Dimension of each agent's control.
    pub control: usize,
    /// Number of agent types.
    pub types: usize,
    /// Number of agents.
    pub agents: usize,
}

/// Coefficients that depend on the agent type.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeParams {
    /// Forward drift matrix (`n × n`).
    pub drift: MatFn,
    /// Linear term of the backward equation (`n × n`).
    pub backward_drift: MatFn,
    /// Control weight in the running cost (`d × d`, symmetric positive definite).
    pub control_weight: MatFn,
    /// Additive diffusion (`n`).
    pub diffusion: VecFn,
    /// Initial state (`n`); the mean of the draw in random-initial mode.
    pub initial_state: DVector<f64>,
    /// Offset of the terminal condition of the backward state (`n`).
    pub terminal_offset: DVector<f64>,
    /// Per-coordinate standard deviation of the initial state in
    /// random-initial mode (`None` means deterministic initial data).
    pub initial_spread: Option<DVector<f64>>,
}

/// Coefficients shared by all agents.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams {
    /// Control entry into the forward drift (`n × d`).
    pub control_drift: MatFn,
    /// Control entry into the forward diffusion (`n × d`).
    pub control_diffusion: MatFn,
    /// Population-average entry into the forward drift (`n × n`).
    pub mean_field_drift: MatFn,
    /// Control entry into the backward drift (`n × d`).
    pub backward_control: MatFn,
    /// Forward-state entry into the backward drift (`n × n`).
    pub backward_state: MatFn,
    /// Population-average entry into the backward drift (`n × n`).
    pub backward_mean_field: MatFn,
    /// Terminal map from forward to backward state (`n × n`).
    pub terminal_map: DMatrix<f64>,
    /// State weight in the running cost (`n × n`, symmetric semidefinite).
    pub state_weight: MatFn,
    /// Tracking matrix: the running cost penalizes `x - S x_avg` (`n × n`).
    pub tracking: MatFn,
    /// Weight on the initial backward value (`n × n`, symmetric semidefinite).
    pub initial_weight: DMatrix<f64>,
}

/// Assignment of agents to types and the limiting type distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    /// Type of every agent, zero-based.
    pub theta: Vec<usize>,
    /// Empirical type proportions.
    pub pi_n: Vec<f64>,
    /// Limiting type proportions.
    pub pi: Vec<f64>,
    /// Largest absolute deviation between `pi_n` and `pi`.
    pub eps_n: f64,
}

impl Population {
    /// Builds a population from an explicit type list.
    pub fn from_theta(theta: Vec<usize>, pi: Vec<f64>) -> Result<Self, ModelError> {
        let types = pi.len();
        if types == 0 {
            return Err(ModelError::Population("at least one type is required".into()));
        }
        if theta.is_empty() {
            return Err(ModelError::Population("at least one agent is required".into()));
        }
        let mut counts = vec![0usize; types];
        for (i, &k) in theta.iter().enumerate() {
            if k >= types {
                return Err(ModelError::Population(format!(
                    "agent {} has type {} but only {} types exist",
                    i + 1,
                    k + 1,
                    types
                )));
            }
            counts[k] += 1;
        }
        let total = theta.len() as f64;
        let pi_n: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
        let eps_n = pi_n.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok(Self { theta, pi_n, pi, eps_n })
    }

    /// Builds a population from per-type counts, agents grouped by type.
    pub fn from_counts(counts: &[usize], pi: Vec<f64>) -> Result<Self, ModelError> {
        if counts.len() != pi.len() {
            return Err(ModelError::Population(format!(
                "{} counts given for {} types",
                counts.len(),
                pi.len()
            )));
        }
        let theta = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
        Self::from_theta(theta, pi)
    }

    /// Population of `agents` agents whose counts follow `pi` by
    /// largest-remainder rounding.
    pub fn proportional(agents: usize, pi: Vec<f64>) -> Result<Self, ModelError> {
        let raw: Vec<f64> = pi.iter().map(|p| p * agents as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..pi.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = raw[a] - raw[a].floor();
            let rb = raw[b] - raw[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let assigned: usize = counts.iter().sum();
        for &k in order.iter().take(agents.saturating_sub(assigned)) {
            counts[k] += 1;
        }
        Self::from_counts(&counts, pi)
    }

    /// Number of agents of each type.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.pi.len()];
        for &k in &self.theta {
            counts[k] += 1;
        }
        counts
    }
}

/// A complete problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Problem dimensions.
    pub dims: Dims,
    /// One entry per agent type.
    pub types: Vec<TypeParams>,
    /// Coefficients common to all agents.
    pub shared: SharedParams,
    /// Agent-to-type assignment.
    pub population: Population,
    /// Horizon and discretization.
    pub grid: Grid,
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<(), ModelError> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(ModelError::Shape {
            name: name.to_string(),
            message: format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

fn check_table<T>(name: &str, f: &TimeFn<T>, steps: usize) -> Result<(), ModelError> {
    if let TimeFn::Table(vs) = f {
        if vs.len() != steps {
            return Err(ModelError::Shape {
                name: name.to_string(),
                message: format!("table has {} entries but the grid has {steps} steps", vs.len()),
            });
        }
    }
    Ok(())
}

fn check_matfn(name: &str, f: &MatFn, rows: usize, cols: usize, steps: usize) -> Result<(), ModelError> {
    check_table(name, f, steps)?;
    f.values().iter().try_for_each(|m| check_shape(name, m, rows, cols))
}

fn check_vector(name: &str, v: &DVector<f64>, len: usize) -> Result<(), ModelError> {
    if v.len() != len {
        return Err(ModelError::Shape { name: name.to_string(), message: format!("expected length {len}, got {}", v.len()) });
    }
    Ok(())
}

impl ModelSpec {
    /// Assembles a spec after checking every shape and table length.
    pub fn new(
        types: Vec<TypeParams>,
        shared: SharedParams,
        population: Population,
        grid: Grid,
    ) -> Result<Self, ModelError> {
        let n = shared.terminal_map.nrows();
        let d = shared.control_drift.at_cell(0).ncols();
        let dims = Dims { state: n, control: d, types: types.len(), agents: population.theta.len() };
        if n == 0 || d == 0 {
            return Err(ModelError::Shape { name: "dims".into(), message: "state and control dimensions must be positive".into() });
        }
        if types.is_empty() {
            return Err(ModelError::Population("at least one type is required".into()));
        }
        if population.pi.len() != types.len() {
            return Err(ModelError::Population(format!(
                "pi has {} entries for {} types",
                population.pi.len(),
                types.len()
            )));
        }
        let steps = grid.steps();
        for (k, tp) in types.iter().enumerate() {
            let tag = |s: &str| format!("types[{k}].{s}");
            check_matfn(&tag("A"), &tp.drift, n, n, steps)?;
            check_matfn(&tag("H"), &tp.backward_drift, n, n, steps)?;
            check_matfn(&tag("R"), &tp.control_weight, d, d, steps)?;
            check_table(&tag("sigma"), &tp.diffusion, steps)?;
            tp.diffusion.values().iter().try_for_each(|v| check_vector(&tag("sigma"), v, n))?;
            check_vector(&tag("xi0"), &tp.initial_state, n)?;
            check_vector(&tag("eta"), &tp.terminal_offset, n)?;
            if let Some(s) = &tp.initial_spread {
                check_vector(&tag("xi_std"), s, n)?;
            }
        }
        let sh = &shared;
        check_matfn("shared.B", &sh.control_drift, n, d, steps)?;
        check_matfn("shared.D", &sh.control_diffusion, n, d, steps)?;
        check_matfn("shared.F", &sh.mean_field_drift, n, n, steps)?;
        check_matfn("shared.Kcoef", &sh.backward_control, n, d, steps)?;
        check_matfn("shared.L", &sh.backward_state, n, n, steps)?;
        check_matfn("shared.M", &sh.backward_mean_field, n, n, steps)?;
        check_shape("shared.Phi", &sh.terminal_map, n, n)?;
        check_matfn("shared.Q", &sh.state_weight, n, n, steps)?;
        check_matfn("shared.S", &sh.tracking, n, n, steps)?;
        check_shape("shared.Gamma", &sh.initial_weight, n, n)?;
        Ok(Self { dims, types, shared, population, grid })
    }

    /// Same instance with a different population.
    pub fn with_population(&self, population: Population) -> Result<Self, ModelError> {
        Self::new(self.types.clone(), self.shared.clone(), population, self.grid)
    }

    /// Same instance on a grid with `steps` intervals. Tabulated
    /// coefficients are resampled by left-endpoint lookup.
    pub fn with_steps(&self, steps: usize) -> Result<Self, ModelError> {
        let grid = Grid::new(self.grid.horizon(), steps)?;
        let old = self.grid;
        let resample_m = |f: &MatFn| match f {
            TimeFn::Const(_) => f.clone(),
            TimeFn::Table(_) => TimeFn::tabulate(steps, |c| f.at_cell(old.cell_of(grid.time(c)).unwrap_or(0)).clone()),
        };
        let resample_v = |f: &VecFn| match f {
            TimeFn::Const(_) => f.clone(),
            TimeFn::Table(_) => TimeFn::tabulate(steps, |c| f.at_cell(old.cell_of(grid.time(c)).unwrap_or(0)).clone()),
        };
        let types = self
            .types
            .iter()
            .map(|t| TypeParams {
                drift: resample_m(&t.drift),
                backward_drift: resample_m(&t.backward_drift),
                control_weight: resample_m(&t.control_weight),
                diffusion: resample_v(&t.diffusion),
                ..t.clone()
            })
            .collect();
        let s = &self.shared;
        let shared = SharedParams {
            control_drift: resample_m(&s.control_drift),
            control_diffusion: resample_m(&s.control_diffusion),
            mean_field_drift: resample_m(&s.mean_field_drift),
            backward_control: resample_m(&s.backward_control),
            backward_state: resample_m(&s.backward_state),
            backward_mean_field: resample_m(&s.backward_mean_field),
            state_weight: resample_m(&s.state_weight),
            tracking: resample_m(&s.tracking),
            ..s.clone()
        };
        Self::new(types, shared, self.population.clone(), grid)
    }

    /// True when no coefficient is tabulated.
    pub fn is_time_invariant(&self) -> bool {
        let s = &self.shared;
        let shared_const = [
            &s.control_drift,
            &s.control_diffusion,
            &s.mean_field_drift,
            &s.backward_control,
            &s.backward_state,
            &s.backward_mean_field,
            &s.state_weight,
            &s.tracking,
        ]
        .iter()
        .all(|f| f.is_const());
        shared_const
            && self.types.iter().all(|t| {
                t.drift.is_const() && t.backward_drift.is_const() && t.control_weight.is_const() && t.diffusion.is_const()
            })
    }

    /// True when some type draws its initial state at random.
    pub fn has_random_initial(&self) -> bool {
        self.types.iter().any(|t| t.initial_spread.as_ref().is_some_and(|s| s.iter().any(|&v| v > 0.0)))
    }

    /// Value of a named coefficient at time `t`.
    ///
    /// Shared names are `B`, `D`, `F`, `Kcoef`, `L`, `M`, `Phi`, `Q`, `S`,
    /// `Gamma`; per-type names are `A`, `H`, `R`, `sigma` followed by a
    /// one-based type suffix, e.g. `A1`. Vectors are returned as columns.
    pub fn coeff_at(&self, name: &str, t: f64) -> Result<DMatrix<f64>, ModelError> {
        let cell = self.grid.cell_of(t).ok_or(ModelError::Horizon { t, horizon: self.grid.horizon() })?;
        let s = &self.shared;
        let shared = match name {
            "B" => Some(&s.control_drift),
            "D" => Some(&s.control_diffusion),
            "F" => Some(&s.mean_field_drift),
            "Kcoef" => Some(&s.backward_control),
            "L" => Some(&s.backward_state),
            "M" => Some(&s.backward_mean_field),
            "Q" => Some(&s.state_weight),
            "S" => Some(&s.tracking),
            _ => None,
        };
        if let Some(f) = shared {
            return Ok(f.at_cell(cell).clone());
        }
        match name {
            "Phi" => return Ok(s.terminal_map.clone()),
            "Gamma" => return Ok(s.initial_weight.clone()),
            _ => {}
        }
        let split = name.find(|c: char| c.is_ascii_digit()).ok_or_else(|| ModelError::UnknownCoefficient(name.into()))?;
        let (base, index) = name.split_at(split);
        let k: usize = index.parse().map_err(|_| ModelError::UnknownCoefficient(name.into()))?;
        let tp = k
            .checked_sub(1)
            .and_then(|k| self.types.get(k))
            .ok_or_else(|| ModelError::UnknownCoefficient(name.into()))?;
        match base {
            "A" => Ok(tp.drift.at_cell(cell).clone()),
            "H" => Ok(tp.backward_drift.at_cell(cell).clone()),
            "R" => Ok(tp.control_weight.at_cell(cell).clone()),
            "sigma" => Ok(DMatrix::from_column_slice(self.dims.state, 1, tp.diffusion.at_cell(cell).as_slice())),
            _ => Err(ModelError::UnknownCoefficient(name.into())),
        }
    }

    /// Weight `QS + SᵀQ − SᵀQS` of the population average in the linearized
    /// social cost, on cell `cell`.
    pub fn tracking_weight(&self, cell: usize) -> DMatrix<f64> {
        let q = self.shared.state_weight.at_cell(cell);
        let s = self.shared.tracking.at_cell(cell);
        q * s + s.transpose() * q - s.transpose() * q * s
    }
}
