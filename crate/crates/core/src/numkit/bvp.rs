//! Linear two-point boundary value problems by single shooting.

use nalgebra::{DMatrix, DVector};

use super::{rk4_integrate, solve_linear, Direction, NumError, StagePoint, TimeGridFn};
use crate::model::Grid;

/// Linear system `z' = J(t) z + f(t)` with `z = (u, v)`, initial condition
/// `u(0) = u0 + G v(0)` and terminal condition `v(T) = P u(T) + c`.
pub struct LinearBvp<'a> {
    /// Integration grid.
    pub grid: Grid,
    /// Size of the forward block `u`.
    pub dim_u: usize,
    /// Size of the backward block `v`.
    pub dim_v: usize,
    /// Coefficient `J(t)`, square of size `dim_u + dim_v`.
    pub jacobian: &'a dyn Fn(StagePoint) -> DMatrix<f64>,
    /// Forcing `f(t)`.
    pub forcing: &'a dyn Fn(StagePoint) -> DVector<f64>,
    /// Fixed part `u0` of the initial condition.
    pub initial: DVector<f64>,
    /// Coupling `G` of `v(0)` into `u(0)`.
    pub initial_coupling: DMatrix<f64>,
    /// Terminal map `P`.
    pub terminal_map: DMatrix<f64>,
    /// Terminal offset `c`.
    pub terminal_offset: DVector<f64>,
}

/// Solution of a [`LinearBvp`].
#[derive(Clone, Debug)]
pub struct BvpSolution {
    /// Stacked `(u, v)` on every grid node.
    pub trajectory: TimeGridFn<DVector<f64>>,
    /// Condition number of the shooting system.
    pub cond: f64,
}

/// Solves a [`LinearBvp`] by propagating one particular and `dim_v`
/// homogeneous solutions with RK4 and matching the terminal condition.
pub fn shoot_linear_bvp(bvp: &LinearBvp<'_>) -> Result<BvpSolution, NumError> {
    let (p, q) = (bvp.dim_u, bvp.dim_v);
    let dim = p + q;
    let check = |what: &str, ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(NumError::Dimension(format!("boundary value problem: {what}")))
        }
    };
    check("initial", bvp.initial.len() == p)?;
    check("initial coupling", bvp.initial_coupling.shape() == (p, q))?;
    check("terminal map", bvp.terminal_map.shape() == (q, p))?;
    check("terminal offset", bvp.terminal_offset.len() == q)?;

    let mut z0 = DMatrix::zeros(dim, q + 1);
    z0.view_mut((0, 0), (p, 1)).copy_from(&bvp.initial);
    z0.view_mut((0, 1), (p, q)).copy_from(&bvp.initial_coupling);
    z0.view_mut((p, 1), (q, q)).fill_with_identity();
    let sweep = rk4_integrate(&bvp.grid, z0, Direction::Forward, |pt, z| {
        let mut dz = (bvp.jacobian)(pt) * z;
        let f = (bvp.forcing)(pt);
        dz.column_mut(0).axpy(1.0, &f, 1.0);
        dz
    })?;
    let zt = sweep.last();
    let mismatch = zt.rows(p, q) - &bvp.terminal_map * zt.rows(0, p);
    let lhs = mismatch.columns(1, q).into_owned();
    let rhs = DMatrix::from_column_slice(q, 1, (&bvp.terminal_offset - mismatch.column(0)).as_slice());
    let solved = solve_linear(&lhs, &rhs, "boundary value shooting")?;
    let mut weights = DVector::from_element(q + 1, 1.0);
    weights.rows_mut(1, q).copy_from(&solved.x.column(0));
    Ok(BvpSolution { trajectory: sweep.map(|z| z * &weights), cond: solved.cond })
}
