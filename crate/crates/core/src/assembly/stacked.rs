//! The consistency system in stacked form, its expectation system and its
//! mean/fluctuation doubling.

use nalgebra::{DMatrix, DVector};

use super::{block_diag, put, AssemblyError, BlockIndex, Coefficients, LinearFbSystem, MeanSplit, NoiseLayout, Side, SystemDims};
use crate::model::{Grid, ModelSpec, TimeFn};
use crate::numkit::solve_linear;

/// Offsets of the per-type components inside the stacked vectors.
///
/// Forward side: `α_k`, `α̃_k`, `X̌_k`. Backward side: `β_k`, `β̃_k`,
/// `Y̌_k`, `ϑ_k`. Integrand side: `γ_k`, `γ̃_k`, `Ž_k`. Each band holds `K`
/// blocks of size `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackedLayout {
    /// State dimension.
    pub n: usize,
    /// Number of types.
    pub k: usize,
}

impl StackedLayout {
    fn band(&self, band: usize, k: usize) -> usize {
        (band * self.k + k) * self.n
    }
    /// Offset of `α_k`.
    pub fn alpha(&self, k: usize) -> usize {
        self.band(0, k)
    }
    /// Offset of `α̃_k`.
    pub fn alpha_adj(&self, k: usize) -> usize {
        self.band(1, k)
    }
    /// Offset of `X̌_k`.
    pub fn x_check(&self, k: usize) -> usize {
        self.band(2, k)
    }
    /// Offset of `β_k`.
    pub fn beta(&self, k: usize) -> usize {
        self.band(0, k)
    }
    /// Offset of `β̃_k`.
    pub fn beta_adj(&self, k: usize) -> usize {
        self.band(1, k)
    }
    /// Offset of `Y̌_k`.
    pub fn y_check(&self, k: usize) -> usize {
        self.band(2, k)
    }
    /// Offset of `ϑ_k`.
    pub fn vartheta(&self, k: usize) -> usize {
        self.band(3, k)
    }
    /// Offset of `γ_k`.
    pub fn gamma(&self, k: usize) -> usize {
        self.band(0, k)
    }
    /// Offset of `γ̃_k`.
    pub fn gamma_adj(&self, k: usize) -> usize {
        self.band(1, k)
    }
    /// Offset of `Ž_k`.
    pub fn z_check(&self, k: usize) -> usize {
        self.band(2, k)
    }
    /// Forward size `3Kn`.
    pub fn x_len(&self) -> usize {
        3 * self.k * self.n
    }
    /// Backward size `4Kn`.
    pub fn y_len(&self) -> usize {
        4 * self.k * self.n
    }
    /// Integrand size `3Kn`.
    pub fn z_len(&self) -> usize {
        3 * self.k * self.n
    }

    /// Named ranges, with every offset shifted by the given amounts.
    fn index_into(&self, index: &mut BlockIndex, suffix: &str, x0: usize, y0: usize, z0: usize) {
        let n = self.n;
        for k in 0..self.k {
            let tag = |s: &str| format!("{s}_{}{suffix}", k + 1);
            index.insert(tag("alpha"), Side::X, x0 + self.alpha(k)..x0 + self.alpha(k) + n);
            index.insert(tag("alpha_adj"), Side::X, x0 + self.alpha_adj(k)..x0 + self.alpha_adj(k) + n);
            index.insert(tag("x_check"), Side::X, x0 + self.x_check(k)..x0 + self.x_check(k) + n);
            index.insert(tag("beta"), Side::Y, y0 + self.beta(k)..y0 + self.beta(k) + n);
            index.insert(tag("beta_adj"), Side::Y, y0 + self.beta_adj(k)..y0 + self.beta_adj(k) + n);
            index.insert(tag("y_check"), Side::Y, y0 + self.y_check(k)..y0 + self.y_check(k) + n);
            index.insert(tag("vartheta"), Side::Y, y0 + self.vartheta(k)..y0 + self.vartheta(k) + n);
            index.insert(tag("gamma"), Side::Z, z0 + self.gamma(k)..z0 + self.gamma(k) + n);
            index.insert(tag("gamma_adj"), Side::Z, z0 + self.gamma_adj(k)..z0 + self.gamma_adj(k) + n);
            index.insert(tag("z_check"), Side::Z, z0 + self.z_check(k)..z0 + self.z_check(k) + n);
        }
    }
}

/// Coefficient blocks of the stacked consistency system on one cell. The
/// `*_bar` blocks multiply expectations.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedBlocks {
    /// Forward drift (`3Kn × 3Kn`).
    pub a1: DMatrix<f64>,
    /// Forward drift on the expectation of the forward state.
    pub a1_bar: DMatrix<f64>,
    /// Backward drift in the backward state (`4Kn × 4Kn`).
    pub a2: DMatrix<f64>,
    /// Backward drift on the expectation of the backward state.
    pub a2_bar: DMatrix<f64>,
    /// Backward drift in the forward state (`4Kn × 3Kn`).
    pub a3: DMatrix<f64>,
    /// Backward drift on the expectation of the forward state.
    pub a3_bar: DMatrix<f64>,
    /// Forward drift in the backward state (`3Kn × 4Kn`).
    pub b1: DMatrix<f64>,
    /// Forward drift in the integrand (`3Kn × 3Kn`).
    pub b2: DMatrix<f64>,
    /// Backward drift in the integrand (`4Kn × 3Kn`).
    pub b3: DMatrix<f64>,
    /// Diffusion in the forward state (`3Kn × 3Kn`).
    pub c: DMatrix<f64>,
    /// Diffusion in the backward state (`3Kn × 4Kn`).
    pub d1: DMatrix<f64>,
    /// Diffusion in the integrand (`3Kn × 3Kn`).
    pub d2: DMatrix<f64>,
    /// Additive diffusion (`3Kn`).
    pub sigma0: DVector<f64>,
}

/// The deterministic system satisfied by the expectations of the stacked
/// consistency system.
#[derive(Clone, Debug)]
pub struct ExpectationSystem {
    /// Time grid.
    pub grid: Grid,
    /// Component offsets.
    pub layout: StackedLayout,
    /// Limiting type distribution.
    pub pi: Vec<f64>,
    /// Dynamic blocks per cell.
    pub blocks: TimeFn<StackedBlocks>,
    /// Initial coupling (`3Kn × 4Kn`).
    pub gamma_bar: DMatrix<f64>,
    /// Terminal coupling (`4Kn × 3Kn`).
    pub phi_bar: DMatrix<f64>,
    /// Initial offset (`3Kn`), expectations of the initial data.
    pub xi: DVector<f64>,
    /// Terminal offset (`4Kn`), expectations of the terminal data.
    pub sigma: DVector<f64>,
    /// Named ranges.
    pub index: BlockIndex,
}

fn control_inverses(spec: &ModelSpec, cell: usize) -> Result<Vec<DMatrix<f64>>, AssemblyError> {
    let d = spec.dims.control;
    spec.types
        .iter()
        .enumerate()
        .map(|(k, tp)| {
            solve_linear(tp.control_weight.at_cell(cell), &DMatrix::identity(d, d), "control weight inverse")
                .map(|s| s.x)
                .map_err(|source| AssemblyError::ControlWeight { k: k + 1, cell, source })
        })
        .collect()
}

fn stacked_blocks(spec: &ModelSpec, cell: usize) -> Result<StackedBlocks, AssemblyError> {
    let lay = StackedLayout { n: spec.dims.state, k: spec.dims.types };
    let (nx, ny, nz) = (lay.x_len(), lay.y_len(), lay.z_len());
    let sh = &spec.shared;
    let b = sh.control_drift.at_cell(cell);
    let d = sh.control_diffusion.at_cell(cell);
    let f = sh.mean_field_drift.at_cell(cell);
    let kc = sh.backward_control.at_cell(cell);
    let l = sh.backward_state.at_cell(cell);
    let m = sh.backward_mean_field.at_cell(cell);
    let q = sh.state_weight.at_cell(cell);
    let w = spec.tracking_weight(cell);
    let pi = &spec.population.pi;
    let rinv = control_inverses(spec, cell)?;
    let mut s = StackedBlocks {
        a1: DMatrix::zeros(nx, nx),
        a1_bar: DMatrix::zeros(nx, nx),
        a2: DMatrix::zeros(ny, ny),
        a2_bar: DMatrix::zeros(ny, ny),
        a3: DMatrix::zeros(ny, nx),
        a3_bar: DMatrix::zeros(ny, nx),
        b1: DMatrix::zeros(nx, ny),
        b2: DMatrix::zeros(nx, nz),
        b3: DMatrix::zeros(ny, nz),
        c: DMatrix::zeros(nx, nx),
        d1: DMatrix::zeros(nx, ny),
        d2: DMatrix::zeros(nx, nz),
        sigma0: DVector::zeros(nx),
    };
    let (ft, mt, lt) = (f.transpose(), m.transpose(), l.transpose());
    for (k, tp) in spec.types.iter().enumerate() {
        let a = tp.drift.at_cell(cell);
        let h = tp.backward_drift.at_cell(cell);
        let r = &rinv[k];
        let (at, ht) = (a.transpose(), h.transpose());
        let brk = -(b * r * kc.transpose());
        let brb = -(b * r * b.transpose());
        let brd = -(b * r * d.transpose());
        let drk = -(d * r * kc.transpose());
        let drb = -(d * r * b.transpose());
        let drd = -(d * r * d.transpose());
        let krb = -(kc * r * b.transpose());
        let krk = -(kc * r * kc.transpose());
        let krd = -(kc * r * d.transpose());

        put(&mut s.a1, lay.alpha(k), lay.alpha(k), a);
        put(&mut s.a1, lay.alpha(k), lay.alpha_adj(k), &brk);
        put(&mut s.a1, lay.alpha_adj(k), lay.alpha_adj(k), &ht);
        put(&mut s.a1, lay.x_check(k), lay.x_check(k), &ht);
        put(&mut s.b1, lay.alpha(k), lay.beta_adj(k), &brb);
        put(&mut s.b2, lay.alpha(k), lay.gamma_adj(k), &brd);
        put(&mut s.c, lay.alpha(k), lay.alpha_adj(k), &drk);
        put(&mut s.d1, lay.alpha(k), lay.beta_adj(k), &drb);
        put(&mut s.d2, lay.alpha(k), lay.gamma_adj(k), &drd);
        s.sigma0.rows_mut(lay.alpha(k), lay.n).copy_from(tp.diffusion.at_cell(cell));

        put(&mut s.a2, lay.beta(k), lay.beta(k), h);
        put(&mut s.a2, lay.beta(k), lay.beta_adj(k), &krb);
        put(&mut s.a2, lay.beta_adj(k), lay.beta_adj(k), &at);
        put(&mut s.a2, lay.y_check(k), lay.y_check(k), &at);
        put(&mut s.a2, lay.vartheta(k), lay.vartheta(k), &at);
        put(&mut s.a3, lay.beta(k), lay.alpha(k), l);
        put(&mut s.a3, lay.beta(k), lay.alpha_adj(k), &krk);
        put(&mut s.a3, lay.beta_adj(k), lay.alpha(k), q);
        put(&mut s.a3, lay.beta_adj(k), lay.alpha_adj(k), &lt);
        put(&mut s.a3, lay.y_check(k), lay.alpha(k), q);
        put(&mut s.a3, lay.y_check(k), lay.x_check(k), &(-&lt));
        put(&mut s.b3, lay.beta(k), lay.gamma_adj(k), &krd);

        for (j, &p) in pi.iter().enumerate() {
            put(&mut s.a1_bar, lay.alpha(k), lay.alpha(j), &(f * p));
            put(&mut s.a2, lay.beta_adj(k), lay.vartheta(j), &(&ft * p));
            put(&mut s.a2, lay.vartheta(k), lay.vartheta(j), &(&ft * p));
            put(&mut s.a2_bar, lay.beta_adj(k), lay.y_check(j), &(&ft * p));
            put(&mut s.a2_bar, lay.vartheta(k), lay.y_check(j), &(&ft * p));
            put(&mut s.a3, lay.beta_adj(k), lay.x_check(j), &(&mt * -p));
            put(&mut s.a3, lay.vartheta(k), lay.x_check(j), &(&mt * -p));
            put(&mut s.a3_bar, lay.beta(k), lay.alpha(j), &(m * p));
            put(&mut s.a3_bar, lay.beta_adj(k), lay.alpha(j), &(&w * -p));
            put(&mut s.a3_bar, lay.vartheta(k), lay.alpha(j), &(&w * -p));
        }
    }
    Ok(s)
}

fn blocks_over_grid(spec: &ModelSpec) -> Result<TimeFn<StackedBlocks>, AssemblyError> {
    if spec.is_time_invariant() {
        Ok(TimeFn::Const(stacked_blocks(spec, 0)?))
    } else {
        Ok(TimeFn::Table((0..spec.grid.steps()).map(|c| stacked_blocks(spec, c)).collect::<Result<_, _>>()?))
    }
}

/// Builds the expectation system of the stacked consistency system.
///
/// Initial data enter through their expectations: in random-initial mode
/// `ξ^{(k)}` is the mean of the draw.
pub fn assemble_expectation(spec: &ModelSpec) -> Result<ExpectationSystem, AssemblyError> {
    let lay = StackedLayout { n: spec.dims.state, k: spec.dims.types };
    let blocks = blocks_over_grid(spec)?;
    let gamma = &spec.shared.initial_weight;
    let phi = &spec.shared.terminal_map;
    let mut gamma_bar = DMatrix::zeros(lay.x_len(), lay.y_len());
    let mut phi_bar = DMatrix::zeros(lay.y_len(), lay.x_len());
    let mut xi = DVector::zeros(lay.x_len());
    let mut sigma = DVector::zeros(lay.y_len());
    for (k, tp) in spec.types.iter().enumerate() {
        put(&mut gamma_bar, lay.alpha_adj(k), lay.beta(k), gamma);
        put(&mut gamma_bar, lay.x_check(k), lay.beta(k), &(-gamma));
        put(&mut phi_bar, lay.beta(k), lay.alpha(k), phi);
        put(&mut phi_bar, lay.beta_adj(k), lay.alpha_adj(k), &phi.transpose());
        put(&mut phi_bar, lay.y_check(k), lay.x_check(k), &(-phi.transpose()));
        xi.rows_mut(lay.alpha(k), lay.n).copy_from(&tp.initial_state);
        sigma.rows_mut(lay.beta(k), lay.n).copy_from(&tp.terminal_offset);
    }
    let mut index = BlockIndex::default();
    lay.index_into(&mut index, "", 0, 0, 0);
    Ok(ExpectationSystem { grid: spec.grid, layout: lay, pi: spec.population.pi.clone(), blocks, gamma_bar, phi_bar, xi, sigma, index })
}

fn doubled(b: &StackedBlocks) -> Coefficients {
    let nx = b.a1.nrows();
    let zero_rows = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(2 * m.nrows(), 2 * m.ncols());
        put(&mut out, m.nrows(), 0, m);
        put(&mut out, m.nrows(), m.ncols(), m);
        out
    };
    let mut diffusion_offset = DVector::zeros(2 * nx);
    diffusion_offset.rows_mut(nx, nx).copy_from(&b.sigma0);
    Coefficients {
        x_drift: block_diag(&(&b.a1 + &b.a1_bar), &b.a1),
        x_from_y: block_diag(&b.b1, &b.b1),
        x_from_z: block_diag(&b.b2, &b.b2),
        y_drift: block_diag(&(&b.a2 + &b.a2_bar), &b.a2),
        y_from_x: block_diag(&(&b.a3 + &b.a3_bar), &b.a3),
        y_from_z: block_diag(&b.b3, &b.b3),
        diff_from_x: zero_rows(&b.c),
        diff_from_y: zero_rows(&b.d1),
        diff_from_z: zero_rows(&b.d2),
        diffusion_offset,
    }
}

/// Builds the doubled (expectation, fluctuation) form of the consistency
/// system.
///
/// The forward state is `(E𝕏, 𝕏 - E𝕏)` of size `6Kn`, the backward state
/// `(E𝕐, 𝕐 - E𝕐)` of size `8Kn` and the integrand `(Eℤ, ℤ - Eℤ)` of size
/// `6Kn`. Only the fluctuation rows of `β`, `β̃`, `Y̌` carry martingale
/// parts, each equal to the full integrand `Eℤ + (ℤ - Eℤ)`; the forward
/// fluctuation rows of type `k` are driven by channel `k`.
pub fn assemble_cc(spec: &ModelSpec) -> Result<LinearFbSystem, AssemblyError> {
    let ex = assemble_expectation(spec)?;
    let lay = ex.layout;
    let (x1, y1, z1) = (lay.x_len(), lay.y_len(), lay.z_len());
    let dims = SystemDims { x: 2 * x1, y: 2 * y1, z: 2 * z1 };
    let coefficients = ex.blocks.map(doubled);

    let mut initial_coupling = DMatrix::zeros(dims.x, dims.y);
    put(&mut initial_coupling, 0, 0, &ex.gamma_bar);
    let terminal_coupling = block_diag(&ex.phi_bar, &ex.phi_bar);
    let mut martingale_embed = DMatrix::zeros(dims.y, dims.z);
    for j in 0..z1 {
        martingale_embed[(y1 + j, j)] = 1.0;
        martingale_embed[(y1 + j, z1 + j)] = 1.0;
    }
    let coupling = DMatrix::identity(dims.y, dims.y) - &terminal_coupling * &initial_coupling;
    let terminal_inverse =
        solve_linear(&coupling, &DMatrix::identity(dims.y, dims.y), "terminal inverse").map_err(AssemblyError::Terminal)?.x;
    let mut initial_offset = DVector::zeros(dims.x);
    initial_offset.rows_mut(0, x1).copy_from(&ex.xi);
    let mut terminal_offset = DVector::zeros(dims.y);
    terminal_offset.rows_mut(0, y1).copy_from(&ex.sigma);

    let x_channel = (0..dims.x)
        .map(|row| (row >= x1).then(|| ((row - x1) % (lay.k * lay.n)) / lay.n))
        .collect();
    let y_channel = (0..dims.y).map(|row| (row >= y1 && row < y1 + z1).then(|| ((row - y1) % (lay.k * lay.n)) / lay.n)).collect();
    let noise = NoiseLayout {
        channels: lay.k,
        x_channel,
        y_channel,
        rows: (y1..y1 + z1).collect(),
        free: (z1..2 * z1).collect(),
        mean_split: Some(MeanSplit { x_mean: (0..x1).collect(), z_mean: (0..z1).collect() }),
    };
    let mut index = BlockIndex::default();
    lay.index_into(&mut index, "", 0, 0, 0);
    lay.index_into(&mut index, "_fluct", x1, y1, z1);
    Ok(LinearFbSystem {
        grid: spec.grid,
        dims,
        coefficients,
        forcing: None,
        initial_coupling,
        terminal_coupling,
        martingale_embed,
        terminal_inverse,
        initial_offset,
        terminal_offset,
        noise,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::scalar_spec;

    #[test]
    fn zero_skeleton() {
        let spec = scalar_spec([0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0; 10], 1, 1.0, 4);
        let sys = assemble_cc(&spec).unwrap();
        assert_eq!(sys.dims, SystemDims { x: 6, y: 8, z: 6 });
        let c = sys.at_cell(0);
        for m in [&c.x_drift, &c.x_from_y, &c.x_from_z, &c.y_drift, &c.y_from_x, &c.y_from_z, &c.diff_from_x, &c.diff_from_y, &c.diff_from_z] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
        assert_eq!(sys.terminal_inverse, DMatrix::identity(8, 8));
        for r in 0..8 {
            for col in 0..6 {
                let expected = if (4..7).contains(&r) && (col == r - 4 || col == r - 1) { 1.0 } else { 0.0 };
                assert_eq!(sys.martingale_embed[(r, col)], expected, "({r},{col})");
            }
        }
    }

    #[test]
    fn dimensions_for_two_types() {
        let mut spec = scalar_spec([0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0; 10], 1, 1.0, 4);
        let n = 3;
        let eye = DMatrix::<f64>::identity(n, n);
        let zero = DMatrix::<f64>::zeros(n, n);
        let lift = |m: &DMatrix<f64>| TimeFn::Const(m.clone());
        for t in spec.types.iter_mut() {
            t.drift = lift(&zero);
            t.backward_drift = lift(&zero);
            t.diffusion = TimeFn::Const(DVector::zeros(n));
            t.initial_state = DVector::zeros(n);
            t.terminal_offset = DVector::zeros(n);
        }
        spec.types.push(spec.types[0].clone());
        let s = &mut spec.shared;
        for f in [&mut s.control_drift, &mut s.control_diffusion, &mut s.backward_control] {
            *f = TimeFn::Const(DMatrix::zeros(n, 1));
        }
        for f in [&mut s.mean_field_drift, &mut s.backward_state, &mut s.backward_mean_field, &mut s.state_weight, &mut s.tracking] {
            *f = lift(&zero);
        }
        s.terminal_map = eye.clone();
        s.initial_weight = eye;
        let pop = crate::model::Population::from_counts(&[1, 1], vec![0.5, 0.5]).unwrap();
        let spec = ModelSpec::new(spec.types, spec.shared, pop, spec.grid).unwrap();
        let sys = assemble_cc(&spec).unwrap();
        assert_eq!((sys.dims.x, sys.dims.y), (36, 48));
        let check = DMatrix::identity(48, 48) - &sys.terminal_coupling * &sys.initial_coupling;
        assert!((&sys.terminal_inverse * check - DMatrix::identity(48, 48)).amax() <= 1e-12);
    }

    #[test]
    fn hand_entry_of_control_coupling() {
        // A = a, B = b, R = r, Kcoef = κ.
        let (a, b, r, kappa) = (0.7, 1.5, 2.0, 0.4);
        let spec = scalar_spec([a, 0.0, r, 0.0, 0.0, 0.0], [b, 0.0, 0.0, kappa, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1, 1.0, 4);
        let ex = assemble_expectation(&spec).unwrap();
        let blocks = ex.blocks.at_cell(0);
        assert_eq!(blocks.a1[(0, 0)], a);
        assert!((blocks.a1[(0, 1)] + b * kappa / r).abs() < 1e-15);
    }

    #[test]
    fn assembly_is_bitwise_deterministic() {
        let spec = scalar_spec([0.3, -0.2, 1.1, 0.5, 1.0, 0.2], [1.0, 0.3, 0.4, 0.2, 0.1, 0.3, 0.6, 1.0, 0.5, 0.4], 3, 1.0, 8);
        let a = assemble_cc(&spec).unwrap();
        let b = assemble_cc(&spec).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.terminal_inverse, b.terminal_inverse);
    }
}
