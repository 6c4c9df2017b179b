//! The decoupling field of a linear forward-backward system.
//!
//! With `x̃ = x - G y - ξ` the ansatz `y = φ x̃ + ψ` turns the system into a
//! matrix Riccati equation for `φ`, solved backward from `φ(T) = Ī P` where
//! `Ī = (I - P G)⁻¹`. Three solvers are provided: direct Runge–Kutta
//! integration, which handles every case, and two linearizations that apply
//! when the integrand cannot feed back into the drift of `φ`.

mod decouple;

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::assembly::{Coefficients, LinearFbSystem, Transformed};
use crate::model::TimeFn;
use crate::numkit::{expm, rk4_integrate, solve_linear, Direction, HermiteTrack, NumError, StagePoint, StagePos, TimeGridFn};

pub use decouple::Decoupling;

/// Errors raised while solving for the decoupling field.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    /// The integrand matching matrix became singular.
    #[error("integrand matching matrix not invertible at t = {t:.6} (condition {cond:.3e})")]
    Breach {
        /// Grid time.
        t: f64,
        /// Condition number encountered.
        cond: f64,
    },
    /// The solution left the finite range.
    #[error("Riccati solution escaped to infinity at t = {t:.6}")]
    Escape {
        /// Grid time of the first non-finite node.
        t: f64,
    },
    /// A linearized method was requested outside its regime.
    #[error("{method} method requires B2 = B3 = 0 or C = D1 = 0 on every cell")]
    SpecialCase {
        /// Requested method.
        method: Method,
    },
    /// The forward factor of the linearization became singular.
    #[error("U(t) singular at t = {t:.6}")]
    USingular {
        /// Grid time.
        t: f64,
    },
    /// The lower-right block of the propagator became singular.
    #[error("propagator block not invertible at node {node} (t = {t:.6})")]
    Determinant {
        /// Grid node.
        node: usize,
        /// Grid time.
        t: f64,
    },
    /// Any other numerical failure.
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Solver for the decoupling field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Backward RK4 on the Riccati equation.
    Direct,
    /// Ratio `V U⁻¹` of a linear system integrated backward.
    Fundamental,
    /// Closed form through the propagator of a linear system.
    Exponential,
}

impl Method {
    /// All methods.
    pub const ALL: [Method; 3] = [Method::Direct, Method::Fundamental, Method::Exponential];

    /// Methods applicable to `sys`.
    pub fn applicable(sys: &LinearFbSystem) -> Vec<Method> {
        if sys.is_special_case() {
            Self::ALL.to_vec()
        } else {
            vec![Method::Direct]
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Direct => "direct",
            Method::Fundamental => "fundamental",
            Method::Exponential => "exponential",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Method::Direct),
            "fundamental" => Ok(Method::Fundamental),
            "exponential" => Ok(Method::Exponential),
            other => Err(format!("unknown Riccati method {other:?} (expected direct, fundamental or exponential)")),
        }
    }
}

/// The decoupling field on the grid with its diagnostics.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    /// Solver used.
    pub method: Method,
    /// `φ` at every node.
    pub phi: TimeGridFn<DMatrix<f64>>,
    mids: Vec<DMatrix<f64>>,
    /// Reciprocal condition number of the integrand matching matrix at
    /// every node.
    pub margins: Vec<f64>,
    /// Smallest entry of `margins`.
    pub min_pivot_margin: f64,
    /// `max |φ(T) - Ī P|`.
    pub terminal_check: f64,
    /// Largest violation of the martingale matching on backward rows that
    /// are not imposed (zero when every row is imposed).
    pub ignored_row_defect: f64,
}

impl RiccatiSolution {
    /// `φ` at a stage point; midpoints use cubic Hermite interpolation.
    pub fn at(&self, p: StagePoint) -> &DMatrix<f64> {
        match p.pos {
            StagePos::Left => &self.phi.values[p.cell],
            StagePos::Right => &self.phi.values[p.cell + 1],
            StagePos::Mid => &self.mids[p.cell],
        }
    }

    /// Writes `t, |φ(t)|, margin(t)` per node as CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,phi_norm,pivot_margin")?;
        for (m, (phi, margin)) in self.phi.values.iter().zip(&self.margins).enumerate() {
            writeln!(out, "{:.16e},{:.16e},{:.16e}", self.phi.grid.time(m), phi.norm(), margin)?;
        }
        Ok(())
    }
}

/// Solves for the decoupling field with the requested method.
pub fn solve(sys: &LinearFbSystem, method: Method) -> Result<RiccatiSolution, RiccatiError> {
    match method {
        Method::Direct => solve_direct(sys),
        Method::Fundamental => solve_fundamental(sys),
        Method::Exponential => solve_exponential(sys),
    }
}

fn breach(t: f64, err: NumError) -> RiccatiError {
    match err {
        NumError::Singular { cond, .. } => RiccatiError::Breach { t, cond },
        other => RiccatiError::Num(other),
    }
}

/// Time derivative of `φ` on one cell.
fn riccati_rhs(
    sys: &LinearFbSystem,
    tr: &Transformed,
    c: &Coefficients,
    t: f64,
    phi: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let mut bracket = phi * &tr.p1 + &tr.p2 * phi + phi * &tr.g * phi + &c.y_from_x;
    if !tr.special {
        let dec = Decoupling::new(sys, tr, phi, &c.diff_from_x).map_err(|e| breach(t, e))?;
        bracket += (phi * &tr.bz + &c.y_from_z) * dec.gain;
    }
    Ok(-bracket)
}

fn terminal_value(sys: &LinearFbSystem) -> DMatrix<f64> {
    &sys.terminal_inverse * &sys.terminal_coupling
}

/// Coefficients seen from node `m`: the cell to its right, or the last cell
/// at the terminal node.
fn node_cell(sys: &LinearFbSystem, m: usize) -> usize {
    m.min(sys.grid.steps() - 1)
}

/// Attaches midpoints and conditioning diagnostics to node values.
fn finish(
    sys: &LinearFbSystem,
    tr: &TimeFn<Transformed>,
    phi: TimeGridFn<DMatrix<f64>>,
    method: Method,
) -> Result<RiccatiSolution, RiccatiError> {
    let mut failure = None;
    let track = HermiteTrack::new(phi, |p, y| {
        riccati_rhs(sys, tr.at_cell(p.cell), sys.at_cell(p.cell), p.t, y).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            y.clone()
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mids = track.mids().to_vec();
    let phi = track.into_nodes();
    let mut margins = Vec::with_capacity(phi.values.len());
    let mut defect: f64 = 0.0;
    for (m, value) in phi.values.iter().enumerate() {
        let cell = node_cell(sys, m);
        let (t_cell, c) = (tr.at_cell(cell), sys.at_cell(cell));
        let dec = Decoupling::new(sys, t_cell, value, &c.diff_from_x).map_err(|e| breach(phi.grid.time(m), e))?;
        margins.push(1.0 / dec.cond);
        defect = defect.max(dec.ignored_row_defect(sys, t_cell, value, &c.diff_from_x));
    }
    let terminal_check = (phi.last() - terminal_value(sys)).amax();
    Ok(RiccatiSolution {
        method,
        min_pivot_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        margins,
        mids,
        phi,
        terminal_check,
        ignored_row_defect: defect,
    })
}

/// Backward RK4 integration of the Riccati equation.
///
/// The integrand term is evaluated through [`Decoupling`] at every stage,
/// with its conditioning monitored; in the special regime it is skipped.
pub fn solve_direct(sys: &LinearFbSystem) -> Result<RiccatiSolution, RiccatiError> {
    let tr = sys.transformed();
    let grid = sys.grid;
    let mut failure = None;
    let result = rk4_integrate(&grid, terminal_value(sys), Direction::Backward, |p, y| {
        match riccati_rhs(sys, tr.at_cell(p.cell), sys.at_cell(p.cell), p.t, y) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                DMatrix::from_element(y.nrows(), y.ncols(), f64::NAN)
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let phi = result.map_err(|e| match e {
        NumError::NonFinite { node } => RiccatiError::Escape { t: grid.time(node) },
        other => RiccatiError::Num(other),
    })?;
    finish(sys, &tr, phi, Method::Direct)
}

/// Linearization `φ = V U⁻¹` with
/// `U' = p1 U + g V`, `V' = -A3 U - p2 V`, `U(T) = I`, `V(T) = Ī P`.
///
/// `det U` starts at 1, so a node with `det U ≤ 0` means `U` became
/// singular somewhere after it.
pub fn solve_fundamental(sys: &LinearFbSystem) -> Result<RiccatiSolution, RiccatiError> {
    if !sys.is_special_case() {
        return Err(RiccatiError::SpecialCase { method: Method::Fundamental });
    }
    let tr = sys.transformed();
    let grid = sys.grid;
    let start = (DMatrix::identity(sys.dims.x, sys.dims.x), terminal_value(sys));
    let uv = rk4_integrate(&grid, start, Direction::Backward, |p, (u, v): &(DMatrix<f64>, DMatrix<f64>)| {
        let t = tr.at_cell(p.cell);
        let a3 = &sys.at_cell(p.cell).y_from_x;
        (&t.p1 * u + &t.g * v, -(a3 * u) - &t.p2 * v)
    })
    .map_err(|e| match e {
        NumError::NonFinite { node } => RiccatiError::Escape { t: grid.time(node) },
        other => RiccatiError::Num(other),
    })?;
    let values = uv
        .values
        .iter()
        .enumerate()
        .map(|(m, (u, v))| {
            if !(u.clone().lu().determinant() > 0.0) {
                return Err(RiccatiError::USingular { t: grid.time(m) });
            }
            solve_linear(&u.transpose(), &v.transpose(), "U")
                .map(|s| s.x.transpose())
                .map_err(|_| RiccatiError::USingular { t: grid.time(m) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    finish(sys, &tr, TimeGridFn::new(grid, values)?, Method::Fundamental)
}

/// Generator of the linear system whose propagator gives `φ` in closed
/// form, expanded around `Ψ0 = Ī P`.
fn propagator_generator(tr: &Transformed, a3: &DMatrix<f64>, psi0: &DMatrix<f64>) -> DMatrix<f64> {
    let (nx, ny) = (tr.p1.nrows(), tr.p2.nrows());
    let mut lambda = DMatrix::zeros(nx + ny, nx + ny);
    lambda.view_mut((0, 0), (nx, nx)).copy_from(&(&tr.p1 + &tr.g * psi0));
    lambda.view_mut((0, nx), (nx, ny)).copy_from(&tr.g);
    let lower = psi0 * &tr.p1 + &tr.p2 * psi0 + psi0 * &tr.g * psi0 + a3;
    lambda.view_mut((nx, 0), (ny, nx)).copy_from(&-lower);
    lambda.view_mut((nx, nx), (ny, ny)).copy_from(&-(&tr.p2 + psi0 * &tr.g));
    lambda
}

/// Closed form `φ(t) = Ψ0 - E22⁻¹ E21` with `E = Ψ(T, t)` the propagator
/// of the generator `Λ` and `Ψ0 = Ī P`.
///
/// Constant coefficients use `E = exp(Λ (T - t))` at every node; tabulated
/// coefficients chain the exact cell propagators
/// `Ψ(T, t_m) = Ψ(T, t_{m+1}) exp(Λ_m dt)`. As with the fundamental
/// method, a non-positive `det E22` flags a singular crossing.
pub fn solve_exponential(sys: &LinearFbSystem) -> Result<RiccatiSolution, RiccatiError> {
    if !sys.is_special_case() {
        return Err(RiccatiError::SpecialCase { method: Method::Exponential });
    }
    let tr = sys.transformed();
    let grid = sys.grid;
    let psi0 = terminal_value(sys);
    let (nx, ny) = (sys.dims.x, sys.dims.y);
    let steps = grid.steps();
    let mut props = vec![DMatrix::identity(nx + ny, nx + ny); steps + 1];
    match &tr {
        TimeFn::Const(t) => {
            let lambda = propagator_generator(t, &sys.at_cell(0).y_from_x, &psi0);
            for (m, prop) in props.iter_mut().enumerate().take(steps) {
                *prop = expm(&(&lambda * (grid.horizon() - grid.time(m))))?;
            }
        }
        TimeFn::Table(_) => {
            for m in (0..steps).rev() {
                let lambda = propagator_generator(tr.at_cell(m), &sys.at_cell(m).y_from_x, &psi0);
                props[m] = &props[m + 1] * expm(&(lambda * grid.dt()))?;
            }
        }
    }
    let values = props
        .iter()
        .enumerate()
        .map(|(m, e)| {
            let e22 = e.view((nx, nx), (ny, ny)).into_owned();
            let e21 = e.view((nx, 0), (ny, nx)).into_owned();
            if !(e22.clone().lu().determinant() > 0.0) {
                return Err(RiccatiError::Determinant { node: m, t: grid.time(m) });
            }
            solve_linear(&e22, &e21, "propagator block")
                .map(|s| &psi0 - s.x)
                .map_err(|_| RiccatiError::Determinant { node: m, t: grid.time(m) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    finish(sys, &tr, TimeGridFn::new(grid, values)?, Method::Exponential)
}
