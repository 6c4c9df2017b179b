//! Time grids and piecewise-constant coefficient functions.

use nalgebra::{DMatrix, DVector};

use super::ModelError;

/// Uniform time grid on `[0, T]`.
///
/// The horizon and the step count are the stored representation; the step
/// size is always derived as `T / steps`, and node times are computed as
/// `T * m / steps` so that the last node is exactly `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    horizon: f64,
    steps: usize,
}

impl Grid {
    /// Creates a grid, rejecting non-positive horizons and fewer than two steps.
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::Grid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps < 2 {
            return Err(ModelError::Grid(format!("at least 2 steps required, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of uniform intervals.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    /// Step size `T / steps`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `m`.
    pub fn time(&self, m: usize) -> f64 {
        if m == self.steps {
            self.horizon
        } else {
            self.horizon * m as f64 / self.steps as f64
        }
    }

    /// Index of the cell `[t_m, t_{m+1})` containing `t`; the horizon itself
    /// belongs to the last cell. Returns `None` outside `[0, T]`.
    pub fn cell_of(&self, t: f64) -> Option<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return None;
        }
        let raw = (t / self.dt()).floor() as usize;
        Some(raw.min(self.steps - 1))
    }

    /// Grid with every cell split into `factor` equal sub-cells.
    pub fn refined(&self, factor: usize) -> Self {
        Self { horizon: self.horizon, steps: self.steps * factor.max(1) }
    }
}

/// A time-dependent coefficient: constant, or one value per grid cell with
/// left-endpoint piecewise-constant semantics.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeFn<T> {
    /// Same value on the whole horizon.
    Const(T),
    /// Value on cell `m` is `values[m]`.
    Table(Vec<T>),
}

/// Matrix-valued coefficient.
pub type MatFn = TimeFn<DMatrix<f64>>;
/// Vector-valued coefficient.
pub type VecFn = TimeFn<DVector<f64>>;

impl<T> TimeFn<T> {
    /// Value on cell `cell`; indices past the table end use the last entry,
    /// which is how the terminal node is evaluated.
    pub fn at_cell(&self, cell: usize) -> &T {
        match self {
            TimeFn::Const(v) => v,
            TimeFn::Table(vs) => &vs[cell.min(vs.len() - 1)],
        }
    }

    /// True for the constant variant.
    pub fn is_const(&self) -> bool {
        matches!(self, TimeFn::Const(_))
    }

    /// All stored values (one for constants).
    pub fn values(&self) -> &[T] {
        match self {
            TimeFn::Const(v) => std::slice::from_ref(v),
            TimeFn::Table(vs) => vs,
        }
    }

    /// Applies `f` to every stored value.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> TimeFn<U> {
        match self {
            TimeFn::Const(v) => TimeFn::Const(f(v)),
            TimeFn::Table(vs) => TimeFn::Table(vs.iter().map(f).collect()),
        }
    }
}

impl<T: Clone> TimeFn<T> {
    /// Table over a grid refined by `factor`, repeating each cell value.
    pub fn refined(&self, factor: usize) -> Self {
        match self {
            TimeFn::Const(v) => TimeFn::Const(v.clone()),
            TimeFn::Table(vs) => TimeFn::Table(
                vs.iter().flat_map(|v| std::iter::repeat_n(v.clone(), factor.max(1))).collect(),
            ),
        }
    }

    /// Builds a table by evaluating `f` on every cell index.
    pub fn tabulate(cells: usize, f: impl FnMut(usize) -> T) -> Self {
        TimeFn::Table((0..cells).map(f).collect())
    }
}

/// Combines several coefficients cell by cell; the result is constant only
/// when every input is constant.
pub fn combine<T, U>(inputs: &[&TimeFn<T>], cells: usize, mut f: impl FnMut(usize) -> U) -> TimeFn<U> {
    if inputs.iter().all(|c| c.is_const()) {
        TimeFn::Const(f(0))
    } else {
        TimeFn::Table((0..cells).map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::new(0.0, 10).is_err());
        assert!(Grid::new(1.0, 1).is_err());
        assert!(Grid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn last_node_is_horizon() {
        let g = Grid::new(0.7, 3).unwrap();
        assert_eq!(g.time(3), 0.7);
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.cell_of(0.7), Some(2));
        assert_eq!(g.cell_of(0.0), Some(0));
        assert_eq!(g.cell_of(0.8), None);
    }

    #[test]
    fn left_endpoint_lookup() {
        let g = Grid::new(1.0, 4).unwrap();
        let f = TimeFn::Table(vec![1.0, 2.0, 3.0, 4.0]);
        let cell = g.cell_of(g.dt() / 2.0).unwrap();
        assert_eq!(*f.at_cell(cell), 1.0);
        assert_eq!(*f.at_cell(g.cell_of(0.25).unwrap()), 2.0);
        assert_eq!(*f.at_cell(4), 4.0);
    }

    #[test]
    fn refinement_repeats_cells() {
        let f = TimeFn::Table(vec![1, 2]);
        assert_eq!(f.refined(3), TimeFn::Table(vec![1, 1, 1, 2, 2, 2]));
        assert_eq!(TimeFn::Const(5).refined(3), TimeFn::Const(5));
    }
}
