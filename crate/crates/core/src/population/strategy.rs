//! Per-type decentralized feedback laws.

use nalgebra::{DMatrix, DVector};

use super::PopulationError;
use crate::assembly::{assemble_agent, LinearFbSystem};
use crate::engine::{solve_offset, ClosedLoop, LoopMaps, OffsetSolution};
use crate::meanfield::{solve_field, MeanFieldProfile};
use crate::model::ModelSpec;
use crate::numkit::solve_linear;
use crate::riccati::{Method, RiccatiSolution};

/// An affine map `v ↦ M v + b0 + Σ_j δ_j b_j`, stored flat for the path
/// simulator. `δ` is the deviation of an agent's initial state from its
/// type mean.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AffineLaw {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub matrix: Vec<f64>,
    /// `rows × (1 + dirs)`, column `0` is `b0`.
    pub offsets: Vec<f64>,
}

impl AffineLaw {
    fn new(matrix: &DMatrix<f64>, offsets: &[DVector<f64>]) -> Self {
        let (rows, cols) = matrix.shape();
        let flat = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| matrix[(i, j)]).collect();
        let mut off = vec![0.0; rows * offsets.len()];
        for (c, v) in offsets.iter().enumerate() {
            for i in 0..rows {
                off[i * offsets.len() + c] = v[i];
            }
        }
        Self { rows, cols, matrix: flat, offsets: off }
    }

    /// Writes `M v + b(δ)` into `out`.
    #[inline]
    pub fn apply(&self, v: &[f64], delta: &[f64], out: &mut [f64]) {
        let width = self.offsets.len() / self.rows.max(1);
        for i in 0..self.rows {
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            let mut acc: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            let offs = &self.offsets[i * width..(i + 1) * width];
            acc += offs[0];
            for (d, b) in delta.iter().zip(&offs[1..]) {
                acc += d * b;
            }
            out[i] = acc;
        }
    }
}

/// Closed-loop laws of one type's auxiliary system at one grid node.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NodeLaw {
    /// Drift of the transformed auxiliary state.
    pub drift: AffineLaw,
    /// Diffusion of the transformed auxiliary state.
    pub diffusion: AffineLaw,
    /// Control `u` as a function of the transformed auxiliary state.
    pub control: AffineLaw,
}

/// Feedback law of one type.
#[derive(Clone, Debug)]
pub struct TypeStrategy {
    /// The type's auxiliary Hamiltonian system.
    pub system: LinearFbSystem,
    /// Its decoupling field.
    pub riccati: RiccatiSolution,
    /// Its offset for the type-mean initial state.
    pub offset: OffsetSolution,
    /// Offsets for the type-mean initial state shifted by each unit vector,
    /// one per state coordinate (empty unless initial states are random).
    pub initial_responses: Vec<OffsetSolution>,
    pub(crate) laws: Vec<NodeLaw>,
}

/// Decentralized strategies of every type.
#[derive(Clone, Debug)]
pub struct StrategyField {
    /// One entry per type.
    pub types: Vec<TypeStrategy>,
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub d: usize,
}

impl StrategyField {
    /// Control of a type-`k` agent at node `m` whose transformed auxiliary
    /// state is `xtilde` and whose initial state deviates from the type mean
    /// by `delta` (empty when initial states are deterministic).
    pub fn control(&self, k: usize, m: usize, xtilde: &DVector<f64>, delta: &[f64]) -> DVector<f64> {
        let law = &self.types[k].laws[m].control;
        let mut out = vec![0.0; law.rows];
        law.apply(xtilde.as_slice(), delta, &mut out);
        DVector::from_vec(out)
    }

    /// Laws on every `factor`-th node, for use on a grid `factor` times
    /// coarser than the one they were built on. The decoupling fields keep
    /// their fine grid.
    pub fn coarsen(&self, factor: usize) -> Result<Self, PopulationError> {
        let nodes = self.types.first().map_or(0, |t| t.laws.len());
        if factor == 0 || (nodes - 1) % factor != 0 {
            return Err(PopulationError::Input(format!("cannot coarsen {} cells by {factor}", nodes - 1)));
        }
        let types = self
            .types
            .iter()
            .map(|t| TypeStrategy { laws: t.laws.iter().step_by(factor).cloned().collect(), ..t.clone() })
            .collect();
        Ok(Self { types, n: self.n, d: self.d })
    }

    /// Number of initial-state directions carried by the laws.
    pub fn initial_dirs(&self) -> usize {
        self.types.first().map_or(0, |t| t.initial_responses.len())
    }
}

/// `u = -R⁻¹ (Bᵀ p + Dᵀ p̄ + Kᵀ q)` as a linear map of `(φ-part, z-part,
/// x-part)` evaluated on one set of closed-loop maps.
fn control_map(spec: &ModelSpec, k: usize, cell: usize, sys: &LinearFbSystem, maps: &LoopMaps) -> Result<(DMatrix<f64>, DVector<f64>), PopulationError> {
    let n = spec.dims.state;
    let d = spec.dims.control;
    let sh = &spec.shared;
    let b = sh.control_drift.at_cell(cell);
    let dm = sh.control_diffusion.at_cell(cell);
    let kc = sh.backward_control.at_cell(cell);
    let rinv = solve_linear(spec.types[k].control_weight.at_cell(cell), &DMatrix::identity(d, d), "control weight inverse")
        .map_err(|e| PopulationError::Strategy { k: k + 1, message: e.to_string() })?
        .x;
    let g = &sys.initial_coupling;
    let x_of_xt = DMatrix::identity(2 * n, 2 * n) + g * &maps.phi;
    let lin = b.transpose() * maps.phi.rows(n, n) + dm.transpose() * maps.gain.rows(n, n) + kc.transpose() * x_of_xt.rows(n, n);
    let gpsi = g * &maps.psi;
    let aff = b.transpose() * maps.psi.rows(n, n) + dm.transpose() * maps.offset.rows(n, n) + kc.transpose() * gpsi.rows(n, n);
    Ok((-(&rinv * lin), -(&rinv * aff)))
}

/// Builds every type's feedback law from the mean-field profile.
pub fn synthesize(spec: &ModelSpec, mf: &MeanFieldProfile, method: Option<Method>) -> Result<StrategyField, PopulationError> {
    let n = spec.dims.state;
    let random = spec.has_random_initial();
    let steps = spec.grid.steps();
    let mut types = Vec::with_capacity(spec.dims.types);
    for k in 0..spec.dims.types {
        let sys = assemble_agent(spec, k, &mf.inputs)?;
        let riccati = solve_field(&sys, method, spec.is_time_invariant()).map_err(|e| PopulationError::Riccati { k: k + 1, source: e })?;
        let offset = solve_offset(&sys, &riccati)?;
        let mut responses = Vec::new();
        let mut unit_systems = Vec::new();
        if random {
            for j in 0..n {
                let mut shifted = sys.initial_offset.clone();
                shifted[j] += 1.0;
                let unit = sys.with_data(shifted, sys.terminal_offset.clone(), sys.forcing.clone());
                responses.push(solve_offset(&unit, &riccati)?);
                unit_systems.push(unit);
            }
        }
        let base_maps = ClosedLoop::new(&sys, &riccati, &offset).node_maps()?;
        let unit_maps = unit_systems
            .iter()
            .zip(&responses)
            .map(|(s, o)| ClosedLoop::new(s, &riccati, o).node_maps())
            .collect::<Result<Vec<_>, _>>()?;
        let mut laws = Vec::with_capacity(steps + 1);
        for (m, base) in base_maps.iter().enumerate() {
            let cell = m.min(steps - 1);
            let (cm, c0) = control_map(spec, k, cell, &sys, base)?;
            let mut drift_off = vec![base.drift_offset.clone()];
            let mut diff_off = vec![base.diffusion_offset.clone()];
            let mut ctrl_off = vec![c0];
            for (unit, maps) in unit_systems.iter().zip(&unit_maps) {
                let um = &maps[m];
                drift_off.push(&um.drift_offset - &base.drift_offset);
                diff_off.push(&um.diffusion_offset - &base.diffusion_offset);
                ctrl_off.push(control_map(spec, k, cell, unit, um)?.1 - &ctrl_off[0]);
            }
            laws.push(NodeLaw {
                drift: AffineLaw::new(&base.drift, &drift_off),
                diffusion: AffineLaw::new(&base.diffusion, &diff_off),
                control: AffineLaw::new(&cm, &ctrl_off),
            });
        }
        types.push(TypeStrategy { system: sys, riccati, offset, initial_responses: responses, laws });
    }
    Ok(StrategyField { types, n, d: spec.dims.control })
}
