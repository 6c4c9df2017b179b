//! Expectation system solved by an explicit fundamental matrix.

use nalgebra::{DMatrix, DVector};

use super::OracleError;
use crate::assembly::ExpectationSystem;
use crate::numkit::{fundamental_with, rk4_integrate, solve_linear, Direction, StagePoint, StageTable, TimeGridFn};

/// Expectations of the stacked forward and backward states on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationPaths {
    /// `E𝕏` on every node.
    pub forward: TimeGridFn<DVector<f64>>,
    /// `E𝕐` on every node.
    pub backward: TimeGridFn<DVector<f64>>,
    /// Condition number of the boundary matrix.
    pub cond: f64,
}

/// Solves the expectation system with the integrand expectation `ez`
/// supplied (or zero when `None`).
///
/// The unknown `E𝕐(0)` is found from the terminal coupling after
/// propagating the fundamental matrix of the full linear system and one
/// particular solution from `(E𝕏(0), E𝕐(0)) = (ξ, 0)`.
pub fn shoot_bvp(ex: &ExpectationSystem, ez: Option<&StageTable<DVector<f64>>>) -> Result<ExpectationPaths, OracleError> {
    let (nx, ny) = (ex.layout.x_len(), ex.layout.y_len());
    let dim = nx + ny;
    let nz = ex.layout.z_len();
    let generator = |p: StagePoint| {
        let b = ex.blocks.at_cell(p.cell);
        let mut j = DMatrix::zeros(dim, dim);
        j.view_mut((0, 0), (nx, nx)).copy_from(&(&b.a1 + &b.a1_bar));
        j.view_mut((0, nx), (nx, ny)).copy_from(&b.b1);
        j.view_mut((nx, 0), (ny, nx)).copy_from(&-(&b.a3 + &b.a3_bar));
        j.view_mut((nx, nx), (ny, ny)).copy_from(&-(&b.a2 + &b.a2_bar));
        j
    };
    let forcing = |p: StagePoint| {
        let b = ex.blocks.at_cell(p.cell);
        let z = ez.map_or_else(|| DVector::zeros(nz), |t| t.at(p).clone());
        let mut f = DVector::zeros(dim);
        f.rows_mut(0, nx).copy_from(&(&b.b2 * &z));
        f.rows_mut(nx, ny).copy_from(&-(&b.b3 * &z));
        f
    };
    let flow = fundamental_with(&ex.grid, dim, 0, generator)?;
    let mut start = DVector::zeros(dim);
    start.rows_mut(0, nx).copy_from(&ex.xi);
    let particular = rk4_integrate(&ex.grid, start, Direction::Forward, |p, z| generator(p) * z + forcing(p))?;

    let mut seed = DMatrix::zeros(dim, ny);
    seed.view_mut((0, 0), (nx, ny)).copy_from(&ex.gamma_bar);
    seed.view_mut((nx, 0), (ny, ny)).fill_with_identity();
    let end = flow.last() * &seed;
    let zp = particular.last();
    let lhs = end.rows(nx, ny) - &ex.phi_bar * end.rows(0, nx);
    let rhs = &ex.sigma - (zp.rows(nx, ny) - &ex.phi_bar * zp.rows(0, nx));
    let solved = solve_linear(&lhs, &DMatrix::from_column_slice(ny, 1, rhs.as_slice()), "expectation boundary matrix")
        .map_err(OracleError::SingularBoundary)?;
    let y0 = solved.x.column(0).into_owned();
    let lift = &seed * &y0;
    let full: Vec<DVector<f64>> = flow.values.iter().zip(&particular.values).map(|(f, p)| p + f * &lift).collect();
    Ok(ExpectationPaths {
        forward: TimeGridFn { grid: ex.grid, values: full.iter().map(|z| z.rows(0, nx).into_owned()).collect() },
        backward: TimeGridFn { grid: ex.grid, values: full.iter().map(|z| z.rows(nx, ny).into_owned()).collect() },
        cond: solved.cond,
    })
}
