//! Block assembly of the linear forward-backward systems handled by the
//! engine.
//!
//! Every system has the shape
//!
//! ```text
//! dx = [A1 x + B1 y + B2 z + fx] dt + [C x + D1 y + D2 z + s0] ∘ dW
//! dy = -[A2 y + A3 x + B3 z + fy] dt + E (z ∘ dW)
//! x(0) = ξ + G y(0),   y(T) = P x(T) + η
//! ```
//!
//! where `∘ dW` multiplies each row by the scalar Brownian increment of the
//! channel it is routed to (see [`NoiseLayout`]). Two concrete systems are
//! built: the doubled mean/fluctuation form of the consistency system
//! ([`assemble_cc`]) and one representative agent's Hamiltonian system
//! ([`assemble_agent`]).

mod agent;
mod dump;
mod stacked;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{Grid, TimeFn};
use crate::numkit::{NumError, StagePoint, StageTable};

pub use agent::{assemble_agent, AgentInputs};
pub use dump::dump;
pub use stacked::{assemble_cc, assemble_expectation, ExpectationSystem, StackedBlocks, StackedLayout};

/// Errors raised during assembly.
#[derive(Debug, Error)]
pub enum AssemblyError {
    /// A control weight could not be inverted.
    #[error("control weight of type {k} on cell {cell}: {source}")]
    ControlWeight {
        /// One-based type.
        k: usize,
        /// Grid cell.
        cell: usize,
        /// Underlying failure.
        source: NumError,
    },
    /// The terminal coupling `I - P G` could not be inverted.
    #[error("terminal coupling: {0}")]
    Terminal(NumError),
    /// A required input is missing or has the wrong size.
    #[error("invalid input: {0}")]
    Input(String),
}

/// Sizes of the forward, backward and martingale-integrand blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SystemDims {
    /// Forward state size.
    pub x: usize,
    /// Backward state size.
    pub y: usize,
    /// Martingale integrand size.
    pub z: usize,
}

/// Dynamic coefficients on one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    /// Forward drift in the forward state (`x × x`).
    pub x_drift: DMatrix<f64>,
    /// Forward drift in the backward state (`x × y`).
    pub x_from_y: DMatrix<f64>,
    /// Forward drift in the integrand (`x × z`).
    pub x_from_z: DMatrix<f64>,
    /// Backward drift in the backward state (`y × y`).
    pub y_drift: DMatrix<f64>,
    /// Backward drift in the forward state (`y × x`).
    pub y_from_x: DMatrix<f64>,
    /// Backward drift in the integrand (`y × z`).
    pub y_from_z: DMatrix<f64>,
    /// Forward diffusion in the forward state (`x × x`).
    pub diff_from_x: DMatrix<f64>,
    /// Forward diffusion in the backward state (`x × y`).
    pub diff_from_y: DMatrix<f64>,
    /// Forward diffusion in the integrand (`x × z`).
    pub diff_from_z: DMatrix<f64>,
    /// Additive forward diffusion (`x`).
    pub diffusion_offset: DVector<f64>,
}

/// Time-dependent affine inputs of the drifts, sampled at stage points.
#[derive(Clone, Debug, PartialEq)]
pub struct Forcing {
    /// Added to the forward drift.
    pub x: StageTable<DVector<f64>>,
    /// Added inside the bracket of the backward drift.
    pub y: StageTable<DVector<f64>>,
}

/// Which forward rows carry the mean copy, and where the mean copy of each
/// free integrand coordinate lives.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanSplit {
    /// Forward rows holding expectations.
    pub x_mean: Vec<usize>,
    /// Mean-copy integrand coordinate paired with each entry of
    /// [`NoiseLayout::free`].
    pub z_mean: Vec<usize>,
}

/// Routing of Brownian noise and the structure of the integrand matching.
///
/// Forward row `j` is driven by channel `x_channel[j]` (`None` for rows that
/// carry no noise) and backward row `r` by channel `y_channel[r]`. The integrand is determined by matching martingale
/// parts on the backward rows listed in `rows`; only the coordinates in
/// `free` are solved for, the remaining ones being zero or, with a
/// [`MeanSplit`], the expectation of the solved ones.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseLayout {
    /// Number of independent scalar Brownian motions.
    pub channels: usize,
    /// Channel of every forward row.
    pub x_channel: Vec<Option<usize>>,
    /// Channel driving the martingale part `(E z)_r` of every backward row.
    pub y_channel: Vec<Option<usize>>,
    /// Backward rows whose martingale part determines the integrand.
    pub rows: Vec<usize>,
    /// Integrand coordinates solved for, in the order of `rows`.
    pub free: Vec<usize>,
    /// Optional mean/fluctuation split of the integrand.
    pub mean_split: Option<MeanSplit>,
}

/// Which side of the system a block lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Forward state.
    X,
    /// Backward state.
    Y,
    /// Martingale integrand.
    Z,
}

/// Named row ranges of a stacked system.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockIndex {
    entries: Vec<(String, Side, Range<usize>)>,
}

impl BlockIndex {
    /// Registers a named range.
    pub fn insert(&mut self, name: impl Into<String>, side: Side, range: Range<usize>) {
        self.entries.push((name.into(), side, range));
    }

    /// Range of a named block.
    pub fn get(&self, name: &str, side: Side) -> Option<Range<usize>> {
        self.entries.iter().find(|(n, s, _)| n == name && *s == side).map(|(_, _, r)| r.clone())
    }

    /// All entries in insertion order.
    pub fn entries(&self) -> &[(String, Side, Range<usize>)] {
        &self.entries
    }
}

/// A linear forward-backward system with mixed boundary conditions.
#[derive(Clone, Debug)]
pub struct LinearFbSystem {
    /// Time grid.
    pub grid: Grid,
    /// Block sizes.
    pub dims: SystemDims,
    /// Dynamic coefficients per cell.
    pub coefficients: TimeFn<Coefficients>,
    /// Affine drift inputs, if any.
    pub forcing: Option<Forcing>,
    /// Coupling `G` of the initial backward value into the forward state.
    pub initial_coupling: DMatrix<f64>,
    /// Terminal map `P`.
    pub terminal_coupling: DMatrix<f64>,
    /// Embedding `E` of the integrand into the backward martingale part.
    pub martingale_embed: DMatrix<f64>,
    /// `(I - P G)⁻¹`.
    pub terminal_inverse: DMatrix<f64>,
    /// Initial offset `ξ`.
    pub initial_offset: DVector<f64>,
    /// Terminal offset `η`.
    pub terminal_offset: DVector<f64>,
    /// Noise routing.
    pub noise: NoiseLayout,
    /// Named ranges.
    pub index: BlockIndex,
}

/// Coefficients of the system after the change of variables
/// `x̃ = x - G y - ξ`, on one cell.
///
/// With `y = φ x̃ + ψ`, `z = K x̃ + k`:
/// `dx̃ = [p1 x̃ + g y + bz z + p1 ξ + fx + G fy] dt + [C x̃ + cd y + d2 z + C ξ + s0] ∘ dW`
/// and `dy = -[p2 y + A3 x̃ + B3 z + A3 ξ + fy] dt + E (z ∘ dW)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    /// `A1 + G A3`.
    pub p1: DMatrix<f64>,
    /// `A2 + A3 G`.
    pub p2: DMatrix<f64>,
    /// `A1 G + G A3 G + G A2 + B1`.
    pub g: DMatrix<f64>,
    /// `B2 + G B3`.
    pub bz: DMatrix<f64>,
    /// `C G + D1`.
    pub cd: DMatrix<f64>,
    /// `D2 - G E`.
    pub d2: DMatrix<f64>,
    /// `A3 ξ`.
    pub y_from_offset: DVector<f64>,
    /// `p1 ξ`.
    pub x_from_offset: DVector<f64>,
    /// `C ξ + s0`.
    pub diff_offset: DVector<f64>,
    /// True when the integrand cannot influence the drift of the
    /// decoupling field (`B2 = B3 = 0` or `C = D1 = 0`).
    pub special: bool,
}

impl Coefficients {
    /// All-zero coefficients of the given sizes.
    pub fn zeros(dims: SystemDims) -> Self {
        let m = DMatrix::zeros;
        Self {
            x_drift: m(dims.x, dims.x),
            x_from_y: m(dims.x, dims.y),
            x_from_z: m(dims.x, dims.z),
            y_drift: m(dims.y, dims.y),
            y_from_x: m(dims.y, dims.x),
            y_from_z: m(dims.y, dims.z),
            diff_from_x: m(dims.x, dims.x),
            diff_from_y: m(dims.x, dims.y),
            diff_from_z: m(dims.x, dims.z),
            diffusion_offset: DVector::zeros(dims.x),
        }
    }

    fn check(&self, dims: SystemDims) -> Result<(), AssemblyError> {
        let expected = [
            ("x_drift", &self.x_drift, dims.x, dims.x),
            ("x_from_y", &self.x_from_y, dims.x, dims.y),
            ("x_from_z", &self.x_from_z, dims.x, dims.z),
            ("y_drift", &self.y_drift, dims.y, dims.y),
            ("y_from_x", &self.y_from_x, dims.y, dims.x),
            ("y_from_z", &self.y_from_z, dims.y, dims.z),
            ("diff_from_x", &self.diff_from_x, dims.x, dims.x),
            ("diff_from_y", &self.diff_from_y, dims.x, dims.y),
            ("diff_from_z", &self.diff_from_z, dims.x, dims.z),
        ];
        for (name, m, r, c) in expected {
            if m.shape() != (r, c) {
                return Err(AssemblyError::Input(format!("{name} is {}x{}, expected {r}x{c}", m.nrows(), m.ncols())));
            }
        }
        if self.diffusion_offset.len() != dims.x {
            return Err(AssemblyError::Input(format!("diffusion_offset has length {}, expected {}", self.diffusion_offset.len(), dims.x)));
        }
        Ok(())
    }
}

impl LinearFbSystem {
    /// A system whose backward state and integrand have the same size, with
    /// `E = I` and every forward row driven by a single Brownian motion.
    pub fn single_noise(
        grid: Grid,
        coefficients: TimeFn<Coefficients>,
        initial_coupling: DMatrix<f64>,
        terminal_coupling: DMatrix<f64>,
        initial_offset: DVector<f64>,
        terminal_offset: DVector<f64>,
    ) -> Result<Self, AssemblyError> {
        let first = coefficients.values().first().ok_or_else(|| AssemblyError::Input("no coefficients".into()))?;
        let dims = SystemDims { x: first.x_drift.nrows(), y: first.y_drift.nrows(), z: first.y_drift.nrows() };
        if let TimeFn::Table(cells) = &coefficients {
            if cells.len() != grid.steps() {
                return Err(AssemblyError::Input(format!("{} coefficient cells for {} grid cells", cells.len(), grid.steps())));
            }
        }
        for c in coefficients.values() {
            c.check(dims)?;
        }
        if initial_coupling.shape() != (dims.x, dims.y) || terminal_coupling.shape() != (dims.y, dims.x) {
            return Err(AssemblyError::Input("boundary couplings have the wrong shape".into()));
        }
        if initial_offset.len() != dims.x || terminal_offset.len() != dims.y {
            return Err(AssemblyError::Input("boundary offsets have the wrong length".into()));
        }
        let coupling = DMatrix::identity(dims.y, dims.y) - &terminal_coupling * &initial_coupling;
        let terminal_inverse = crate::numkit::solve_linear(&coupling, &DMatrix::identity(dims.y, dims.y), "terminal inverse")
            .map_err(AssemblyError::Terminal)?
            .x;
        Ok(Self {
            grid,
            dims,
            coefficients,
            forcing: None,
            initial_coupling,
            terminal_coupling,
            martingale_embed: DMatrix::identity(dims.y, dims.y),
            terminal_inverse,
            initial_offset,
            terminal_offset,
            noise: NoiseLayout {
                channels: 1,
                x_channel: vec![Some(0); dims.x],
                y_channel: vec![Some(0); dims.y],
                rows: (0..dims.y).collect(),
                free: (0..dims.y).collect(),
                mean_split: None,
            },
            index: BlockIndex::default(),
        })
    }

    /// Coefficients on `cell`.
    pub fn at_cell(&self, cell: usize) -> &Coefficients {
        self.coefficients.at_cell(cell)
    }

    /// Transformed coefficients on every cell.
    pub fn transformed(&self) -> TimeFn<Transformed> {
        let gamma = &self.initial_coupling;
        let xi = &self.initial_offset;
        self.coefficients.map(|c| {
            let p1 = &c.x_drift + gamma * &c.y_from_x;
            let p2 = &c.y_drift + &c.y_from_x * gamma;
            let g = &c.x_drift * gamma + gamma * &c.y_from_x * gamma + gamma * &c.y_drift + &c.x_from_y;
            let bz = &c.x_from_z + gamma * &c.y_from_z;
            let cd = &c.diff_from_x * gamma + &c.diff_from_y;
            let d2 = &c.diff_from_z - gamma * &self.martingale_embed;
            let special = (is_zero(&c.x_from_z) && is_zero(&c.y_from_z)) || (is_zero(&c.diff_from_x) && is_zero(&c.diff_from_y));
            Transformed {
                x_from_offset: &p1 * xi,
                y_from_offset: &c.y_from_x * xi,
                diff_offset: &c.diff_from_x * xi + &c.diffusion_offset,
                p1,
                p2,
                g,
                bz,
                cd,
                d2,
                special,
            }
        })
    }

    /// True when every cell is in the special-case regime where the
    /// decoupling field solves a quadratic equation without the integrand
    /// term.
    pub fn is_special_case(&self) -> bool {
        self.coefficients.values().iter().all(|c| {
            (is_zero(&c.x_from_z) && is_zero(&c.y_from_z)) || (is_zero(&c.diff_from_x) && is_zero(&c.diff_from_y))
        })
    }

    /// Drift inputs at a stage point, zero when absent.
    pub fn forcing_at(&self, p: StagePoint) -> (DVector<f64>, DVector<f64>) {
        match &self.forcing {
            Some(f) => (f.x.at(p).clone(), f.y.at(p).clone()),
            None => (DVector::zeros(self.dims.x), DVector::zeros(self.dims.y)),
        }
    }

    /// Same system with different initial and terminal offsets and forcing.
    pub fn with_data(&self, initial: DVector<f64>, terminal: DVector<f64>, forcing: Option<Forcing>) -> Self {
        Self { initial_offset: initial, terminal_offset: terminal, forcing, ..self.clone() }
    }
}

pub(crate) fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&x| x == 0.0)
}

/// Adds `block` into `target` at `(row, col)`.
pub(crate) fn put(target: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    let mut view = target.view_mut((row, col), block.shape());
    view += block;
}

/// Block-diagonal matrix `diag(a, b)`.
pub(crate) fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    put(&mut m, 0, 0, a);
    put(&mut m, a.nrows(), a.ncols(), b);
    m
}
