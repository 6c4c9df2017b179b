//! The deterministic mean-field profile obtained from the consistency
//! system, and the aggregate input `Θ` of every agent's problem.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::assembly::{assemble_cc, assemble_expectation, AgentInputs, AssemblyError, LinearFbSystem, StackedLayout};
use crate::engine::{solve_deterministic, solve_offset, ClosedLoop, EngineError, StageValues};
use crate::model::{Grid, ModelSpec};
use crate::numkit::{shoot_linear_bvp, LinearBvp, NumError, StagePoint, StageTable, TimeGridFn};
use crate::riccati::{self, Method, RiccatiError, RiccatiSolution};

/// Largest accepted violation of the expectation system's boundary
/// conditions.
pub const BOUNDARY_TOLERANCE: f64 = 1e-6;

/// Errors raised while solving the consistency system.
#[derive(Debug, Error)]
pub enum MeanFieldError {
    /// Assembly failure.
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    /// Decoupling field failure.
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    /// Offset or trajectory failure.
    #[error(transparent)]
    Engine(#[from] EngineError),
    /// The boundary conditions of the expectation system are violated.
    #[error("expectation system boundary residual {residual:.3e} exceeds {BOUNDARY_TOLERANCE:e}")]
    Boundary {
        /// Largest residual found.
        residual: f64,
    },
    /// Failure of the independent boundary value solve.
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Deterministic mean-field quantities on the grid.
#[derive(Clone, Debug)]
pub struct MeanFieldProfile {
    /// Time grid.
    pub grid: Grid,
    /// Component offsets of the stacked system.
    pub layout: StackedLayout,
    /// Population mean `X̂ = Σ π_l E α_l`.
    pub xhat: TimeGridFn<DVector<f64>>,
    /// Per type, the deterministic adjoint `ϑ_k`.
    pub vartheta: Vec<TimeGridFn<DVector<f64>>>,
    /// Per type, `X̌_k`.
    pub x_check: Vec<TimeGridFn<DVector<f64>>>,
    /// Per type, `E Y̌_k`.
    pub ey_check: Vec<TimeGridFn<DVector<f64>>>,
    /// Per type, `E α_k`.
    pub e_alpha: Vec<TimeGridFn<DVector<f64>>>,
    /// Per type, `α̃_k`.
    pub alpha_adj: Vec<TimeGridFn<DVector<f64>>>,
    /// Per type, `E β_k`.
    pub e_beta: Vec<TimeGridFn<DVector<f64>>>,
    /// Aggregate adjoint input `Θ`.
    pub theta: TimeGridFn<DVector<f64>>,
    /// `X̂` and `Θ` at every stage point.
    pub inputs: AgentInputs,
    /// Expected integrand `E ℤ` (`3Kn`) at every stage point.
    pub expected_integrand: StageTable<DVector<f64>>,
    /// Decoupling field of the doubled consistency system.
    pub riccati: RiccatiSolution,
    /// Largest violation of the expectation system's boundary conditions.
    pub boundary_residual: f64,
}

impl MeanFieldProfile {
    /// Writes one row per node: `t`, `X̂`, `Θ`, then `ϑ_k`, `X̌_k`, `E Y̌_k`
    /// for every type.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.layout.n;
        let mut header = vec!["t".to_string()];
        let comps = |name: String| (1..=n).map(move |i| format!("{name}_{i}"));
        header.extend(comps("xhat".into()));
        header.extend(comps("theta".into()));
        for k in 1..=self.layout.k {
            header.extend(comps(format!("vartheta{k}")));
            header.extend(comps(format!("xcheck{k}")));
            header.extend(comps(format!("eycheck{k}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for m in 0..self.grid.nodes() {
            let mut row = vec![self.grid.time(m)];
            row.extend(self.xhat.at(m).iter());
            row.extend(self.theta.at(m).iter());
            for k in 0..self.layout.k {
                row.extend(self.vartheta[k].at(m).iter());
                row.extend(self.x_check[k].at(m).iter());
                row.extend(self.ey_check[k].at(m).iter());
            }
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn block(v: &DVector<f64>, start: usize, n: usize) -> DVector<f64> {
    v.rows(start, n).into_owned()
}

/// `X̂ = Σ π_l E α_l` from the mean copy of the forward state.
fn population_mean(lay: &StackedLayout, pi: &[f64], x: &DVector<f64>) -> DVector<f64> {
    pi.iter().enumerate().fold(DVector::zeros(lay.n), |acc, (l, p)| acc + block(x, lay.alpha(l), lay.n) * *p)
}

/// `Θ = W X̂ - Σ π_l Fᵀ ϑ_l - Σ π_l (Fᵀ E Y̌_l - Mᵀ X̌_l)` on `cell`.
fn aggregate_input(spec: &ModelSpec, lay: &StackedLayout, cell: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = lay.n;
    let f = spec.shared.mean_field_drift.at_cell(cell);
    let m = spec.shared.backward_mean_field.at_cell(cell);
    let pi = &spec.population.pi;
    let mut theta = spec.tracking_weight(cell) * population_mean(lay, pi, x);
    for (l, &p) in pi.iter().enumerate() {
        theta -= f.transpose() * block(y, lay.vartheta(l), n) * p;
        theta -= (f.transpose() * block(y, lay.y_check(l), n) - m.transpose() * block(x, lay.x_check(l), n)) * p;
    }
    theta
}

/// Solves the decoupling field, trying `preferred` first.
///
/// Without a preference the direct method is used, falling back to the
/// closed form when the coefficients are constant and it applies.
pub fn solve_field(sys: &LinearFbSystem, preferred: Option<Method>, constant: bool) -> Result<RiccatiSolution, RiccatiError> {
    if let Some(method) = preferred {
        return riccati::solve(sys, method);
    }
    match riccati::solve_direct(sys) {
        Ok(sol) => Ok(sol),
        Err(err) if constant && sys.is_special_case() => riccati::solve_exponential(sys).map_err(|_| err),
        Err(err) => Err(err),
    }
}

/// Solves the consistency system with the default method order.
pub fn solve_consistency(spec: &ModelSpec) -> Result<MeanFieldProfile, MeanFieldError> {
    solve_consistency_with(spec, None)
}

/// Solves the consistency system, optionally forcing a Riccati method.
pub fn solve_consistency_with(spec: &ModelSpec, method: Option<Method>) -> Result<MeanFieldProfile, MeanFieldError> {
    let sys = assemble_cc(spec)?;
    let ric = solve_field(&sys, method, spec.is_time_invariant())?;
    let off = solve_offset(&sys, &ric)?;
    let cl = ClosedLoop::new(&sys, &ric, &off);
    let det = solve_deterministic(&cl)?;
    let boundary_residual = det.initial_residual.max(det.terminal_residual);
    if !(boundary_residual <= BOUNDARY_TOLERANCE) {
        return Err(MeanFieldError::Boundary { residual: boundary_residual });
    }
    let lay = StackedLayout { n: spec.dims.state, k: spec.dims.types };
    let grid = spec.grid;
    let n = lay.n;
    let pi = &spec.population.pi;
    let per_type = |side: &TimeGridFn<DVector<f64>>, offset: &dyn Fn(usize) -> usize| -> Vec<TimeGridFn<DVector<f64>>> {
        (0..lay.k).map(|k| side.map(|v| block(v, offset(k), n))).collect()
    };
    let xhat = det.x.map(|x| population_mean(&lay, pi, x));
    let theta_nodes = (0..grid.nodes())
        .map(|m| aggregate_input(spec, &lay, m.min(grid.steps() - 1), det.x.at(m), det.y.at(m)))
        .collect();
    let stages = StageTable::try_from_fn(&grid, |p| det.at(&cl, p))?;
    let map_stages = |f: &dyn Fn(StagePoint, &StageValues) -> DVector<f64>| StageTable::from_fn(&grid, |p| f(p, stages.at(p)));
    let inputs = AgentInputs {
        mean_state: map_stages(&|_, s| population_mean(&lay, pi, &s.x)),
        adjoint_input: map_stages(&|p, s| aggregate_input(spec, &lay, p.cell, &s.x, &s.y)),
    };
    let expected_integrand = map_stages(&|_, s| s.z.rows(0, lay.z_len()).into_owned());
    Ok(MeanFieldProfile {
        grid,
        layout: lay,
        vartheta: per_type(&det.y, &|k| lay.vartheta(k)),
        x_check: per_type(&det.x, &|k| lay.x_check(k)),
        ey_check: per_type(&det.y, &|k| lay.y_check(k)),
        e_alpha: per_type(&det.x, &|k| lay.alpha(k)),
        alpha_adj: per_type(&det.x, &|k| lay.alpha_adj(k)),
        e_beta: per_type(&det.y, &|k| lay.beta(k)),
        xhat,
        theta: TimeGridFn::new(grid, theta_nodes)?,
        inputs,
        expected_integrand,
        riccati: ric,
        boundary_residual,
    })
}

/// Re-solves the expectation system with `mf`'s population mean and
/// expected integrand frozen as inputs, by shooting, and returns the sup
/// norm of the change in the population mean.
pub fn fixed_point_residual(spec: &ModelSpec, mf: &MeanFieldProfile) -> Result<f64, MeanFieldError> {
    let ex = assemble_expectation(spec)?;
    let lay = ex.layout;
    let (nx, ny) = (lay.x_len(), lay.y_len());
    let frozen = |p: StagePoint| {
        let xhat = mf.inputs.mean_state.at(p);
        let mut v = DVector::zeros(nx);
        for l in 0..lay.k {
            v.rows_mut(lay.alpha(l), lay.n).copy_from(xhat);
        }
        v
    };
    let jacobian = |p: StagePoint| {
        let b = ex.blocks.at_cell(p.cell);
        let mut j = DMatrix::zeros(nx + ny, nx + ny);
        j.view_mut((0, 0), (nx, nx)).copy_from(&b.a1);
        j.view_mut((0, nx), (nx, ny)).copy_from(&b.b1);
        j.view_mut((nx, 0), (ny, nx)).copy_from(&-&b.a3);
        j.view_mut((nx, nx), (ny, ny)).copy_from(&-(&b.a2 + &b.a2_bar));
        j
    };
    let forcing = |p: StagePoint| {
        let b = ex.blocks.at_cell(p.cell);
        let ez = mf.expected_integrand.at(p);
        let xf = frozen(p);
        let mut f = DVector::zeros(nx + ny);
        f.rows_mut(0, nx).copy_from(&(&b.a1_bar * &xf + &b.b2 * ez));
        f.rows_mut(nx, ny).copy_from(&-(&b.a3_bar * &xf + &b.b3 * ez));
        f
    };
    let bvp = LinearBvp {
        grid: spec.grid,
        dim_u: nx,
        dim_v: ny,
        jacobian: &jacobian,
        forcing: &forcing,
        initial: ex.xi.clone(),
        initial_coupling: ex.gamma_bar.clone(),
        terminal_map: ex.phi_bar.clone(),
        terminal_offset: ex.sigma.clone(),
    };
    let sol = shoot_linear_bvp(&bvp)?;
    Ok(sol
        .trajectory
        .values
        .iter()
        .zip(&mf.xhat.values)
        .map(|(uv, xhat)| (population_mean(&lay, &ex.pi, &uv.rows(0, nx).into_owned()) - xhat).amax())
        .fold(0.0, f64::max))
}
