//! Dense linear algebra and integration primitives.
//!
//! Everything here is a pure function of its inputs. ODE right-hand sides are
//! evaluated at [`StagePoint`]s, which carry both the time and the grid cell
//! of a Runge–Kutta stage: analytic coefficients use the time, tabulated
//! (piecewise-constant) coefficients use the cell, so a stage sitting on the
//! right end of a cell still sees that cell's value.

mod bvp;
mod expm;
mod linsolve;
mod ode;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::Grid;

pub use bvp::{shoot_linear_bvp, BvpSolution, LinearBvp};
pub use expm::expm;
pub use linsolve::{condition_1norm, solve_linear, Solved, SINGULAR_CONDITION};
pub use ode::{fundamental, fundamental_with, rk4_integrate, Direction, HermiteTrack};

/// Errors raised by the numerical primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    /// A square matrix was required.
    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    /// A linear system is singular to working precision.
    #[error("singular system in {context} (condition estimate {cond:.3e})")]
    Singular { context: String, cond: f64 },
    /// An integration produced a non-finite value.
    #[error("non-finite value at grid node {node}")]
    NonFinite { node: usize },
    /// A node index outside the grid.
    #[error("grid node {node} outside 0..={steps}")]
    OutOfGrid { node: usize, steps: usize },
    /// Inconsistent operand dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Position of a Runge–Kutta stage inside a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagePos {
    /// Left node of the cell.
    Left,
    /// Midpoint of the cell.
    Mid,
    /// Right node of the cell.
    Right,
}

/// Where a right-hand side is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePoint {
    /// Time of the stage.
    pub t: f64,
    /// Grid cell containing the stage.
    pub cell: usize,
    /// Position within the cell.
    pub pos: StagePos,
}

impl StagePoint {
    /// Grid node the stage sits on, if it is not a midpoint.
    pub fn node(&self) -> Option<usize> {
        match self.pos {
            StagePos::Left => Some(self.cell),
            StagePos::Right => Some(self.cell + 1),
            StagePos::Mid => None,
        }
    }

    /// Left-node stage of cell `cell`.
    pub fn left(grid: &Grid, cell: usize) -> Self {
        Self { t: grid.time(cell), cell, pos: StagePos::Left }
    }
}

/// Values on every grid node, `values[m]` at `t_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGridFn<T> {
    /// Grid the values live on.
    pub grid: Grid,
    /// One value per node, `steps + 1` in total.
    pub values: Vec<T>,
}

impl<T> TimeGridFn<T> {
    /// Wraps node values, checking the count.
    pub fn new(grid: Grid, values: Vec<T>) -> Result<Self, NumError> {
        if values.len() != grid.nodes() {
            return Err(NumError::Dimension(format!("{} values for {} nodes", values.len(), grid.nodes())));
        }
        Ok(Self { grid, values })
    }

    /// Value at node `m`.
    pub fn at(&self, m: usize) -> &T {
        &self.values[m]
    }

    /// Value at the last node.
    pub fn last(&self) -> &T {
        &self.values[self.values.len() - 1]
    }

    /// Applies `f` node by node.
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> TimeGridFn<U> {
        TimeGridFn { grid: self.grid, values: self.values.iter().map(f).collect() }
    }
}

impl TimeGridFn<DMatrix<f64>> {
    /// Value at a stage point; midpoints interpolate the two cell nodes
    /// linearly.
    pub fn at_stage(&self, p: StagePoint) -> DMatrix<f64> {
        match p.node() {
            Some(m) => self.values[m].clone(),
            None => (&self.values[p.cell] + &self.values[p.cell + 1]) * 0.5,
        }
    }
}

/// Values of a function at the three Runge–Kutta stage positions of every
/// grid cell. The right-stage value of cell `m` and the left-stage value of
/// cell `m + 1` share a time but may differ when coefficients jump.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTable<T> {
    cells: Vec<[T; 3]>,
}

impl<T> StageTable<T> {
    /// Samples `f` at every stage point of `grid`.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(StagePoint) -> T) -> Self {
        match Self::try_from_fn(grid, |p| Ok::<T, std::convert::Infallible>(f(p))) {
            Ok(table) => table,
            Err(never) => match never {},
        }
    }

    /// Samples a fallible `f` at every stage point, stopping at the first
    /// error.
    pub fn try_from_fn<E>(grid: &Grid, mut f: impl FnMut(StagePoint) -> Result<T, E>) -> Result<Self, E> {
        let cells = (0..grid.steps())
            .map(|cell| {
                let at = |pos, t| StagePoint { t, cell, pos };
                let (t0, t1) = (grid.time(cell), grid.time(cell + 1));
                Ok([
                    f(at(StagePos::Left, t0))?,
                    f(at(StagePos::Mid, t0 + 0.5 * grid.dt()))?,
                    f(at(StagePos::Right, t1))?,
                ])
            })
            .collect::<Result<_, E>>()?;
        Ok(Self { cells })
    }

    /// Value at a stage point.
    pub fn at(&self, p: StagePoint) -> &T {
        let slot = match p.pos {
            StagePos::Left => 0,
            StagePos::Mid => 1,
            StagePos::Right => 2,
        };
        &self.cells[p.cell][slot]
    }

    /// Applies `f` to every stage value.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> StageTable<U> {
        StageTable { cells: self.cells.iter().map(|[a, b, c]| [f(a), f(b), f(c)]).collect() }
    }

    /// Number of cells.
    pub fn cells(&self) -> usize {
        self.cells.len()
    }
}

/// State of an ODE integrated by [`rk4_integrate`].
pub trait OdeState: Clone {
    /// `self + s * other`.
    fn add_scaled(&self, other: &Self, s: f64) -> Self;
    /// True when every entry is finite.
    fn all_finite(&self) -> bool;
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl OdeState for DVector<f64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl OdeState for f64 {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self + other * s
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        (self.0.add_scaled(&other.0, s), self.1.add_scaled(&other.1, s))
    }
    fn all_finite(&self) -> bool {
        self.0.all_finite() && self.1.all_finite()
    }
}
