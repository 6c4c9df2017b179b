//! Classical Runge–Kutta integration on a uniform grid.

use nalgebra::DMatrix;

use super::{NumError, OdeState, StagePoint, StagePos, TimeGridFn};
use crate::model::Grid;

/// Integration direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// From `t = 0` to `t = T`; the initial value sits at node 0.
    Forward,
    /// From `t = T` to `t = 0`; the initial value sits at the last node.
    Backward,
}

fn stage(grid: &Grid, cell: usize, pos: StagePos) -> StagePoint {
    let t = match pos {
        StagePos::Left => grid.time(cell),
        StagePos::Mid => grid.time(cell) + 0.5 * grid.dt(),
        StagePos::Right => grid.time(cell + 1),
    };
    StagePoint { t, cell, pos }
}

/// One RK4 step across `cell`, from its left node when `forward` and from
/// its right node otherwise. `rhs` always returns the derivative in true
/// time.
fn step<S: OdeState>(grid: &Grid, cell: usize, y: &S, forward: bool, rhs: &mut impl FnMut(StagePoint, &S) -> S) -> S {
    let h = if forward { grid.dt() } else { -grid.dt() };
    let (start, end) = if forward { (StagePos::Left, StagePos::Right) } else { (StagePos::Right, StagePos::Left) };
    let k1 = rhs(stage(grid, cell, start), y);
    let k2 = rhs(stage(grid, cell, StagePos::Mid), &y.add_scaled(&k1, 0.5 * h));
    let k3 = rhs(stage(grid, cell, StagePos::Mid), &y.add_scaled(&k2, 0.5 * h));
    let k4 = rhs(stage(grid, cell, end), &y.add_scaled(&k3, h));
    let incr = k1.add_scaled(&k2, 2.0).add_scaled(&k3, 2.0).add_scaled(&k4, 1.0);
    y.add_scaled(&incr, h / 6.0)
}

/// Integrates `y' = rhs(t, y)` over the whole grid with classical RK4.
///
/// `y0` is the value at node 0 for [`Direction::Forward`] and at the last
/// node for [`Direction::Backward`]. The result is indexed by node in both
/// cases. Fails at the first node carrying a non-finite value.
pub fn rk4_integrate<S: OdeState>(
    grid: &Grid,
    y0: S,
    direction: Direction,
    mut rhs: impl FnMut(StagePoint, &S) -> S,
) -> Result<TimeGridFn<S>, NumError> {
    let steps = grid.steps();
    let mut values = Vec::with_capacity(steps + 1);
    if !y0.all_finite() {
        let node = if direction == Direction::Forward { 0 } else { steps };
        return Err(NumError::NonFinite { node });
    }
    values.push(y0);
    match direction {
        Direction::Forward => {
            for cell in 0..steps {
                let next = step(grid, cell, &values[cell], true, &mut rhs);
                if !next.all_finite() {
                    return Err(NumError::NonFinite { node: cell + 1 });
                }
                values.push(next);
            }
        }
        Direction::Backward => {
            for cell in (0..steps).rev() {
                let next = step(grid, cell, values.last().expect("non-empty"), false, &mut rhs);
                if !next.all_finite() {
                    return Err(NumError::NonFinite { node: cell });
                }
                values.push(next);
            }
            values.reverse();
        }
    }
    Ok(TimeGridFn { grid: *grid, values })
}

/// Fundamental matrix `Ψ(·, s)` of `Ψ' = A(t) Ψ`, `Ψ(s, s) = I`, with the
/// coefficient supplied as a function of the stage point.
///
/// Nodes after `s` are reached forward and nodes before `s` backward, so the
/// result covers the whole grid and `Ψ(s, s) = I` exactly.
pub fn fundamental_with(
    grid: &Grid,
    dim: usize,
    s: usize,
    mut a: impl FnMut(StagePoint) -> DMatrix<f64>,
) -> Result<TimeGridFn<DMatrix<f64>>, NumError> {
    let steps = grid.steps();
    if s > steps {
        return Err(NumError::OutOfGrid { node: s, steps });
    }
    let mut values = vec![DMatrix::identity(dim, dim); steps + 1];
    let mut rhs = |p: StagePoint, y: &DMatrix<f64>| a(p) * y;
    for cell in s..steps {
        let next = step(grid, cell, &values[cell], true, &mut rhs);
        if !next.all_finite() {
            return Err(NumError::NonFinite { node: cell + 1 });
        }
        values[cell + 1] = next;
    }
    for cell in (0..s).rev() {
        let next = step(grid, cell, &values[cell + 1], false, &mut rhs);
        if !next.all_finite() {
            return Err(NumError::NonFinite { node: cell });
        }
        values[cell] = next;
    }
    Ok(TimeGridFn { grid: *grid, values })
}

/// Fundamental matrix of a coefficient given by its node values; midpoint
/// stages interpolate linearly between the two nodes of the cell.
pub fn fundamental(afn: &TimeGridFn<DMatrix<f64>>, s: usize) -> Result<TimeGridFn<DMatrix<f64>>, NumError> {
    let a0 = afn.at(0);
    if !a0.is_square() {
        return Err(NumError::NonSquare { rows: a0.nrows(), cols: a0.ncols() });
    }
    fundamental_with(&afn.grid, a0.nrows(), s, |p| afn.at_stage(p))
}

/// Node values of a trajectory together with one-sided slopes per cell,
/// giving fourth-order accurate values at cell midpoints by cubic Hermite
/// interpolation.
///
/// The slopes at both ends of cell `m` are evaluated with cell `m`'s
/// coefficients, so the interpolant stays smooth inside each cell even when
/// coefficients jump between cells.
#[derive(Clone, Debug)]
pub struct HermiteTrack<S> {
    values: TimeGridFn<S>,
    mids: Vec<S>,
}

impl<S: OdeState> HermiteTrack<S> {
    /// Builds the track of a trajectory of `y' = rhs(t, y)`.
    pub fn new(values: TimeGridFn<S>, mut rhs: impl FnMut(StagePoint, &S) -> S) -> Self {
        let grid = values.grid;
        let dt = grid.dt();
        let mids = (0..grid.steps())
            .map(|cell| {
                let y0 = &values.values[cell];
                let y1 = &values.values[cell + 1];
                let s0 = rhs(stage(&grid, cell, StagePos::Left), y0);
                let s1 = rhs(stage(&grid, cell, StagePos::Right), y1);
                y0.add_scaled(&y1.add_scaled(y0, -1.0), 0.5).add_scaled(&s0.add_scaled(&s1, -1.0), dt / 8.0)
            })
            .collect();
        Self { values, mids }
    }

    /// Value at a stage point.
    pub fn at(&self, p: StagePoint) -> &S {
        match p.pos {
            StagePos::Left => &self.values.values[p.cell],
            StagePos::Right => &self.values.values[p.cell + 1],
            StagePos::Mid => &self.mids[p.cell],
        }
    }

    /// Node values.
    pub fn nodes(&self) -> &TimeGridFn<S> {
        &self.values
    }

    /// Midpoint values, one per cell.
    pub fn mids(&self) -> &[S] {
        &self.mids
    }

    /// Consumes the track, returning the node values.
    pub fn into_nodes(self) -> TimeGridFn<S> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::expm;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn grid(steps: usize) -> Grid {
        Grid::new(1.0, steps).unwrap()
    }

    #[test]
    fn zero_rhs_is_constant() {
        let y = rk4_integrate(&grid(10), 3.5, Direction::Forward, |_, _| 0.0).unwrap();
        assert!(y.values.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn exponential_forward_and_backward() {
        let g = grid(1000);
        let f = rk4_integrate(&g, 1.0, Direction::Forward, |_, y| *y).unwrap();
        assert!((f.last() - std::f64::consts::E).abs() < 1e-8);
        let b = rk4_integrate(&g, 1.0, Direction::Backward, |_, y| -*y).unwrap();
        assert!((b.at(0) - std::f64::consts::E).abs() < 1e-8);
        assert_eq!(*b.last(), 1.0);
    }

    #[test]
    fn fourth_order_convergence() {
        let err = |steps| {
            let y = rk4_integrate(&grid(steps), 1.0, Direction::Forward, |p, y: &f64| p.t.cos() * y).unwrap();
            (y.last() - 1f64.sin().exp()).abs()
        };
        let (e1, e2) = (err(20), err(40));
        assert!(e1 / e2 >= 12.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn non_finite_reports_node() {
        let r = rk4_integrate(&grid(10), 1.0, Direction::Forward, |p, y| if p.cell == 4 { f64::NAN } else { *y });
        assert_eq!(r.unwrap_err(), NumError::NonFinite { node: 5 });
    }

    #[test]
    fn fundamental_of_zero_is_identity() {
        let afn = TimeGridFn::new(grid(5), vec![DMatrix::zeros(2, 2); 6]).unwrap();
        let psi = fundamental(&afn, 2).unwrap();
        assert!(psi.values.iter().all(|m| *m == DMatrix::identity(2, 2)));
    }

    #[test]
    fn fundamental_matches_expm() {
        let g = grid(1000);
        let lambda = dmatrix![0.3, 1.0; -0.7, -0.2];
        let afn = TimeGridFn::new(g, vec![lambda.clone(); g.nodes()]).unwrap();
        let psi = fundamental(&afn, 250).unwrap();
        for m in [0, 250, 600, 1000] {
            let exact = expm(&(&lambda * (g.time(m) - g.time(250)))).unwrap();
            assert_relative_eq!(psi.at(m), &exact, epsilon = 1e-8);
        }
        assert_eq!(*psi.at(250), DMatrix::identity(2, 2));
    }

    #[test]
    fn fundamental_of_linear_scalar() {
        let g = grid(1000);
        let afn = TimeGridFn::new(g, (0..g.nodes()).map(|m| DMatrix::from_element(1, 1, g.time(m))).collect()).unwrap();
        let psi = fundamental(&afn, 0).unwrap();
        assert!((psi.last()[(0, 0)] - 0.5f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn fundamental_rejects_outside_node() {
        let afn = TimeGridFn::new(grid(4), vec![DMatrix::zeros(1, 1); 5]).unwrap();
        assert_eq!(fundamental(&afn, 5).unwrap_err(), NumError::OutOfGrid { node: 5, steps: 4 });
    }

    #[test]
    fn hermite_midpoints_are_fourth_order() {
        let err = |steps| {
            let g = grid(steps);
            let rhs = |p: StagePoint, y: &f64| p.t * y;
            let y = rk4_integrate(&g, 1.0, Direction::Forward, rhs).unwrap();
            let track = HermiteTrack::new(y, rhs);
            (0..steps)
                .map(|c| {
                    let t = g.time(c) + 0.5 * g.dt();
                    (track.mids()[c] - (0.5 * t * t).exp()).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(10), err(20));
        assert!(e1 / e2 >= 12.0, "ratio {}", e1 / e2);
    }
}
