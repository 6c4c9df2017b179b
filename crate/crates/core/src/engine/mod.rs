//! Solving and simulating a linear forward-backward system once its
//! decoupling field is known.
//!
//! With `y = φ x̃ + ψ` and `z = K x̃ + k` the transformed forward state
//! `x̃ = x - G y - ξ` solves a closed linear SDE started at zero. This
//! module computes the offset `ψ`, the closed-loop coefficients, an
//! accurate deterministic solution, and Euler–Maruyama paths.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::assembly::{LinearFbSystem, Transformed};
use crate::model::{Grid, TimeFn};
use crate::numkit::{rk4_integrate, Direction, HermiteTrack, NumError, StagePoint, StagePos, StageTable, TimeGridFn};
use crate::riccati::{Decoupling, RiccatiError, RiccatiSolution};

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    /// Failure of the decoupling field or its integrand matching.
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    /// A simulated or integrated state became non-finite.
    #[error("non-finite state at node {node} (t = {t:.6})")]
    NonFinite {
        /// Grid node.
        node: usize,
        /// Grid time.
        t: f64,
    },
    /// Noise input of the wrong shape.
    #[error("noise input: {0}")]
    Noise(String),
    /// Any other numerical failure.
    #[error(transparent)]
    Num(NumError),
}

impl From<NumError> for EngineError {
    fn from(e: NumError) -> Self {
        EngineError::Num(e)
    }
}

fn breach(t: f64, e: NumError) -> EngineError {
    match e {
        NumError::Singular { cond, .. } => EngineError::Riccati(RiccatiError::Breach { t, cond }),
        other => EngineError::Num(other),
    }
}

/// Integrand matchings at every stage point.
fn decouplings(sys: &LinearFbSystem, tr: &TimeFn<Transformed>, ric: &RiccatiSolution) -> Result<StageTable<Decoupling>, EngineError> {
    StageTable::try_from_fn(&sys.grid, |p| {
        let c = sys.at_cell(p.cell);
        Decoupling::new(sys, tr.at_cell(p.cell), ric.at(p), &c.diff_from_x).map_err(|e| breach(p.t, e))
    })
}

/// The offset `ψ` of the decoupling ansatz.
#[derive(Clone, Debug)]
pub struct OffsetSolution {
    /// `ψ` at every node.
    pub psi: TimeGridFn<DVector<f64>>,
    mids: Vec<DVector<f64>>,
    /// The martingale part of `ψ` vanishes (deterministic data).
    pub b_is_zero: bool,
    /// `max |ψ(T) - Ī (P ξ + η)|`.
    pub terminal_check: f64,
}

impl OffsetSolution {
    /// `ψ` at a stage point.
    pub fn at(&self, p: StagePoint) -> &DVector<f64> {
        match p.pos {
            StagePos::Left => &self.psi.values[p.cell],
            StagePos::Right => &self.psi.values[p.cell + 1],
            StagePos::Mid => &self.mids[p.cell],
        }
    }
}

/// Terminal value `Ī (P ξ + η)` of the offset.
pub fn offset_terminal(sys: &LinearFbSystem) -> DVector<f64> {
    &sys.terminal_inverse * (&sys.terminal_coupling * &sys.initial_offset + &sys.terminal_offset)
}

/// Solves the offset equation
/// `ψ' = -[(p2 + φ g) ψ + (φ bz + B3) k + (φ p1 + A3) ξ + φ (fx + G fy) + fy]`
/// backward from `ψ(T) = Ī (P ξ + η)`, where `k` is the affine part of the
/// integrand and depends on `ψ`.
pub fn solve_offset(sys: &LinearFbSystem, ric: &RiccatiSolution) -> Result<OffsetSolution, EngineError> {
    let tr = sys.transformed();
    let decs = decouplings(sys, &tr, ric)?;
    let rhs = |p: StagePoint, psi: &DVector<f64>| {
        let t = tr.at_cell(p.cell);
        let c = sys.at_cell(p.cell);
        let phi = ric.at(p);
        let k = decs.at(p).offset(sys, t, phi, psi);
        let (fx, fy) = sys.forcing_at(p);
        let bracket = (&t.p2 + phi * &t.g) * psi
            + (phi * &t.bz + &c.y_from_z) * k
            + phi * (&t.x_from_offset + fx + &sys.initial_coupling * &fy)
            + &t.y_from_offset
            + fy;
        -bracket
    };
    let terminal = offset_terminal(sys);
    let psi = rk4_integrate(&sys.grid, terminal.clone(), Direction::Backward, rhs)
        .map_err(|e| non_finite(&sys.grid, e))?;
    let track = HermiteTrack::new(psi, rhs);
    let mids = track.mids().to_vec();
    let psi = track.into_nodes();
    let terminal_check = (psi.last() - terminal).amax();
    Ok(OffsetSolution { psi, mids, b_is_zero: true, terminal_check })
}

fn non_finite(grid: &Grid, e: NumError) -> EngineError {
    match e {
        NumError::NonFinite { node } => EngineError::NonFinite { node, t: grid.time(node) },
        other => EngineError::Num(other),
    }
}

/// Closed-loop coefficients at one stage point.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopMaps {
    /// `φ`.
    pub phi: DMatrix<f64>,
    /// `ψ`.
    pub psi: DVector<f64>,
    /// Integrand gain `K`.
    pub gain: DMatrix<f64>,
    /// Integrand offset `k`.
    pub offset: DVector<f64>,
    /// Drift of `x̃` in `x̃`: `p1 + g φ + bz K`.
    pub drift: DMatrix<f64>,
    /// Affine drift of `x̃`: `g ψ + bz k + p1 ξ + fx + G fy`.
    pub drift_offset: DVector<f64>,
    /// Diffusion of `x̃` in `x̃`: `C + cd φ + d2 K`.
    pub diffusion: DMatrix<f64>,
    /// Affine diffusion of `x̃`: `cd ψ + d2 k + C ξ + s0`.
    pub diffusion_offset: DVector<f64>,
}

/// The closed-loop system of `x̃` together with the data needed to
/// recover `(x, y, z)`.
#[derive(Clone, Debug)]
pub struct ClosedLoop<'a> {
    /// The underlying system.
    pub sys: &'a LinearFbSystem,
    /// Decoupling field.
    pub riccati: &'a RiccatiSolution,
    /// Offset.
    pub offset: &'a OffsetSolution,
    tr: TimeFn<Transformed>,
}

impl<'a> ClosedLoop<'a> {
    /// Binds a system to its decoupling field and offset.
    pub fn new(sys: &'a LinearFbSystem, riccati: &'a RiccatiSolution, offset: &'a OffsetSolution) -> Self {
        Self { sys, riccati, offset, tr: sys.transformed() }
    }

    /// Transformed coefficients on `cell`.
    pub fn transformed(&self, cell: usize) -> &Transformed {
        self.tr.at_cell(cell)
    }

    /// Integrand `z = K x̃ + k` at a stage point.
    pub fn reconstruct_z(&self, p: StagePoint, xtilde: &DVector<f64>) -> Result<DVector<f64>, EngineError> {
        let m = self.maps_at(p)?;
        Ok(&m.gain * xtilde + &m.offset)
    }

    /// Closed-loop coefficients at a stage point.
    pub fn maps_at(&self, p: StagePoint) -> Result<LoopMaps, EngineError> {
        let sys = self.sys;
        let t = self.tr.at_cell(p.cell);
        let c = sys.at_cell(p.cell);
        let phi = self.riccati.at(p).clone();
        let psi = self.offset.at(p).clone();
        let dec = Decoupling::new(sys, t, &phi, &c.diff_from_x).map_err(|e| breach(p.t, e))?;
        let offset = dec.offset(sys, t, &phi, &psi);
        let (fx, fy) = sys.forcing_at(p);
        let drift = &t.p1 + &t.g * &phi + &t.bz * &dec.gain;
        let drift_offset = &t.g * &psi + &t.bz * &offset + &t.x_from_offset + fx + &sys.initial_coupling * fy;
        let diffusion = &c.diff_from_x + &t.cd * &phi + &t.d2 * &dec.gain;
        let diffusion_offset = &t.cd * &psi + &t.d2 * &offset + &t.diff_offset;
        Ok(LoopMaps { phi, psi, gain: dec.gain, offset, drift, drift_offset, diffusion, diffusion_offset })
    }

    /// Maps at the left node of every cell followed by the maps at the
    /// terminal node (seen from the last cell).
    pub fn node_maps(&self) -> Result<Vec<LoopMaps>, EngineError> {
        let grid = &self.sys.grid;
        let mut out = (0..grid.steps()).map(|cell| self.maps_at(StagePoint::left(grid, cell))).collect::<Result<Vec<_>, _>>()?;
        let last = grid.steps() - 1;
        out.push(self.maps_at(StagePoint { t: grid.horizon(), cell: last, pos: StagePos::Right })?);
        Ok(out)
    }

    /// `x = x̃ + G y + ξ`.
    pub fn state(&self, xtilde: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        xtilde + &self.sys.initial_coupling * y + &self.sys.initial_offset
    }

    /// `|y(T) - P x(T) - η|∞`.
    pub fn terminal_residual(&self, x_t: &DVector<f64>, y_t: &DVector<f64>) -> f64 {
        (y_t - &self.sys.terminal_coupling * x_t - &self.sys.terminal_offset).amax()
    }

    /// `|x(0) - ξ - G y(0)|∞`.
    pub fn initial_residual(&self, x0: &DVector<f64>, y0: &DVector<f64>) -> f64 {
        (x0 - &self.sys.initial_offset - &self.sys.initial_coupling * y0).amax()
    }
}

/// Trajectories of `(x̃, x, y, z)` at grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledPath {
    /// Transformed forward state.
    pub xtilde: Vec<DVector<f64>>,
    /// Forward state.
    pub x: Vec<DVector<f64>>,
    /// Backward state from the ansatz.
    pub y: Vec<DVector<f64>>,
    /// Integrand.
    pub z: Vec<DVector<f64>>,
    /// Backward state obtained by forward Euler of its own dynamics from the
    /// ansatz value `y(0)`.
    pub y_forward: Vec<DVector<f64>>,
    /// `|x(0) - ξ - G y(0)|∞`.
    pub initial_residual: f64,
    /// `|y(T) - P x(T) - η|∞` for the forward-integrated backward state.
    pub terminal_residual: f64,
}

/// Euler–Maruyama simulation of the decoupled system along one path.
///
/// `maps` comes from [`ClosedLoop::node_maps`]; `noise[m]` holds the
/// Brownian increments of every channel over cell `m`.
pub fn simulate_decoupled(cl: &ClosedLoop<'_>, maps: &[LoopMaps], noise: &[DVector<f64>]) -> Result<DecoupledPath, EngineError> {
    let sys = cl.sys;
    let grid = sys.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    if maps.len() != steps + 1 {
        return Err(EngineError::Noise(format!("{} closed-loop maps for {} nodes", maps.len(), steps + 1)));
    }
    if noise.len() != steps || noise.iter().any(|w| w.len() != sys.noise.channels) {
        return Err(EngineError::Noise(format!("expected {steps} cells of {} increments", sys.noise.channels)));
    }
    let route = |v: &DVector<f64>, channels: &[Option<usize>], dw: &DVector<f64>| {
        DVector::from_fn(v.len(), |j, _| channels[j].map_or(0.0, |ch| v[j] * dw[ch]))
    };
    let mut xtilde = vec![DVector::zeros(sys.dims.x)];
    for (m, map) in maps.iter().take(steps).enumerate() {
        let xt = &xtilde[m];
        let drift = &map.drift * xt + &map.drift_offset;
        let diff = &map.diffusion * xt + &map.diffusion_offset;
        let next = xt + drift * dt + route(&diff, &sys.noise.x_channel, &noise[m]);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite { node: m + 1, t: grid.time(m + 1) });
        }
        xtilde.push(next);
    }
    let y: Vec<_> = xtilde.iter().zip(maps).map(|(xt, m)| &m.phi * xt + &m.psi).collect();
    let z: Vec<_> = xtilde.iter().zip(maps).map(|(xt, m)| &m.gain * xt + &m.offset).collect();
    let x: Vec<_> = xtilde.iter().zip(&y).map(|(xt, yv)| cl.state(xt, yv)).collect();
    let mut y_forward = vec![y[0].clone()];
    for m in 0..steps {
        let c = sys.at_cell(m);
        let t = cl.transformed(m);
        let (_, fy) = sys.forcing_at(StagePoint::left(&grid, m));
        let yf = &y_forward[m];
        let bracket = &t.p2 * yf + &c.y_from_x * &xtilde[m] + &c.y_from_z * &z[m] + &t.y_from_offset + fy;
        let mart = route(&(&sys.martingale_embed * &z[m]), &sys.noise.y_channel, &noise[m]);
        y_forward.push(yf - bracket * dt + mart);
    }
    let initial_residual = cl.initial_residual(&x[0], &y[0]);
    let terminal_residual = cl.terminal_residual(&x[steps], &y_forward[steps]);
    Ok(DecoupledPath { xtilde, x, y, z, y_forward, initial_residual, terminal_residual })
}

/// Deterministic solution of the closed loop (no noise), with midpoint
/// values from cubic Hermite interpolation.
#[derive(Clone, Debug)]
pub struct DeterministicSolution {
    /// Transformed forward state.
    pub xtilde: HermiteTrack<DVector<f64>>,
    /// Forward state at nodes.
    pub x: TimeGridFn<DVector<f64>>,
    /// Backward state at nodes.
    pub y: TimeGridFn<DVector<f64>>,
    /// Integrand at nodes.
    pub z: TimeGridFn<DVector<f64>>,
    /// `|x(0) - ξ - G y(0)|∞`.
    pub initial_residual: f64,
    /// `|y(T) - P x(T) - η|∞`.
    pub terminal_residual: f64,
}

/// State values `(x, y, z)` at a stage point of a deterministic solution.
#[derive(Clone, Debug, PartialEq)]
pub struct StageValues {
    /// Forward state.
    pub x: DVector<f64>,
    /// Backward state.
    pub y: DVector<f64>,
    /// Integrand.
    pub z: DVector<f64>,
}

impl DeterministicSolution {
    /// `(x, y, z)` at any stage point.
    pub fn at(&self, cl: &ClosedLoop<'_>, p: StagePoint) -> Result<StageValues, EngineError> {
        let xt = self.xtilde.at(p);
        let m = cl.maps_at(p)?;
        let y = &m.phi * xt + &m.psi;
        let z = &m.gain * xt + &m.offset;
        Ok(StageValues { x: cl.state(xt, &y), y, z })
    }
}

/// Integrates `x̃' = (drift) x̃ + drift_offset` from `x̃(0) = 0` with RK4,
/// ignoring the noise.
pub fn solve_deterministic(cl: &ClosedLoop<'_>) -> Result<DeterministicSolution, EngineError> {
    let grid = cl.sys.grid;
    let maps = StageTable::try_from_fn(&grid, |p| cl.maps_at(p))?;
    let rhs = |p: StagePoint, xt: &DVector<f64>| {
        let m = maps.at(p);
        &m.drift * xt + &m.drift_offset
    };
    let nodes = rk4_integrate(&grid, DVector::zeros(cl.sys.dims.x), Direction::Forward, rhs).map_err(|e| non_finite(&grid, e))?;
    let xtilde = HermiteTrack::new(nodes, rhs);
    let node_maps = (0..grid.nodes()).map(|m| {
        if m < grid.steps() {
            maps.at(StagePoint::left(&grid, m))
        } else {
            maps.at(StagePoint { t: grid.horizon(), cell: m - 1, pos: StagePos::Right })
        }
    });
    let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for (xt, m) in xtilde.nodes().values.iter().zip(node_maps) {
        let y = &m.phi * xt + &m.psi;
        zs.push(&m.gain * xt + &m.offset);
        xs.push(cl.state(xt, &y));
        ys.push(y);
    }
    let initial_residual = cl.initial_residual(&xs[0], &ys[0]);
    let terminal_residual = cl.terminal_residual(xs.last().expect("nodes"), ys.last().expect("nodes"));
    Ok(DeterministicSolution {
        xtilde,
        x: TimeGridFn::new(grid, xs)?,
        y: TimeGridFn::new(grid, ys)?,
        z: TimeGridFn::new(grid, zs)?,
        initial_residual,
        terminal_residual,
    })
}

#[cfg(test)]
mod tests;
