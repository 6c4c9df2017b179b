//! One representative agent's Hamiltonian system.

use nalgebra::{DMatrix, DVector};

use super::{put, AssemblyError, BlockIndex, Coefficients, Forcing, LinearFbSystem, NoiseLayout, Side, SystemDims};
use crate::model::{ModelSpec, TimeFn};
use crate::numkit::{solve_linear, StageTable};

/// Deterministic mean-field inputs of an agent's problem, sampled at stage
/// points.
#[derive(Clone, Debug)]
pub struct AgentInputs {
    /// Population mean of the forward state.
    pub mean_state: StageTable<DVector<f64>>,
    /// Aggregate adjoint input entering the drift of the adjoint state.
    pub adjoint_input: StageTable<DVector<f64>>,
}

fn agent_coefficients(spec: &ModelSpec, k: usize, cell: usize) -> Result<Coefficients, AssemblyError> {
    let n = spec.dims.state;
    let d = spec.dims.control;
    let sh = &spec.shared;
    let tp = &spec.types[k];
    let b = sh.control_drift.at_cell(cell);
    let dm = sh.control_diffusion.at_cell(cell);
    let kc = sh.backward_control.at_cell(cell);
    let l = sh.backward_state.at_cell(cell);
    let q = sh.state_weight.at_cell(cell);
    let a = tp.drift.at_cell(cell);
    let h = tp.backward_drift.at_cell(cell);
    let r = solve_linear(tp.control_weight.at_cell(cell), &DMatrix::identity(d, d), "control weight inverse")
        .map_err(|source| AssemblyError::ControlWeight { k: k + 1, cell, source })?
        .x;
    let z = || DMatrix::zeros(2 * n, 2 * n);
    let mut c = Coefficients {
        x_drift: z(),
        x_from_y: z(),
        x_from_z: z(),
        y_drift: z(),
        y_from_x: z(),
        y_from_z: z(),
        diff_from_x: z(),
        diff_from_y: z(),
        diff_from_z: z(),
        diffusion_offset: DVector::zeros(2 * n),
    };
    // Forward state (X, q), backward state (Y, p), integrand (Z, p̄).
    put(&mut c.x_drift, 0, 0, a);
    put(&mut c.x_drift, 0, n, &-(b * &r * kc.transpose()));
    put(&mut c.x_drift, n, n, &h.transpose());
    put(&mut c.x_from_y, 0, n, &-(b * &r * b.transpose()));
    put(&mut c.x_from_z, 0, n, &-(b * &r * dm.transpose()));
    put(&mut c.diff_from_x, 0, n, &-(dm * &r * kc.transpose()));
    put(&mut c.diff_from_y, 0, n, &-(dm * &r * b.transpose()));
    put(&mut c.diff_from_z, 0, n, &-(dm * &r * dm.transpose()));
    c.diffusion_offset.rows_mut(0, n).copy_from(tp.diffusion.at_cell(cell));

    put(&mut c.y_drift, 0, 0, h);
    put(&mut c.y_drift, 0, n, &-(kc * &r * b.transpose()));
    put(&mut c.y_drift, n, n, &a.transpose());
    put(&mut c.y_from_x, 0, 0, l);
    put(&mut c.y_from_x, 0, n, &-(kc * &r * kc.transpose()));
    put(&mut c.y_from_x, n, 0, q);
    put(&mut c.y_from_x, n, n, &l.transpose());
    put(&mut c.y_from_z, 0, n, &-(kc * &r * dm.transpose()));
    Ok(c)
}

/// Builds the Hamiltonian system of a type-`k` agent (zero-based `k`).
///
/// Forward state `(X, q)`, backward state `(Y, p)`, integrand `(Z, p̄)`,
/// all of size `2n`. Boundary conditions `X(0) = ξ`, `q(0) = Γ Y(0)`,
/// `Y(T) = Φ X(T) + η`, `p(T) = Φᵀ q(T)`. The mean-field inputs enter as
/// affine drift terms: `F X̂` in the `X` row, `M X̂` in the `Y` bracket and
/// `-Θ` in the `p` bracket, i.e. `dp = -[Aᵀ p + Lᵀ q + Q X - Θ] dt + p̄ dW`.
pub fn assemble_agent(spec: &ModelSpec, k: usize, inputs: &AgentInputs) -> Result<LinearFbSystem, AssemblyError> {
    let n = spec.dims.state;
    if k >= spec.dims.types {
        return Err(AssemblyError::Input(format!("type {} out of range", k + 1)));
    }
    let steps = spec.grid.steps();
    if inputs.mean_state.cells() != steps || inputs.adjoint_input.cells() != steps {
        return Err(AssemblyError::Input(format!("mean-field inputs must cover all {steps} cells")));
    }
    let coefficients = if spec.is_time_invariant() {
        TimeFn::Const(agent_coefficients(spec, k, 0)?)
    } else {
        TimeFn::Table((0..steps).map(|c| agent_coefficients(spec, k, c)).collect::<Result<_, _>>()?)
    };
    let sh = &spec.shared;
    let forcing = Forcing {
        x: StageTable::from_fn(&spec.grid, |p| {
            let mut v = DVector::zeros(2 * n);
            v.rows_mut(0, n).copy_from(&(sh.mean_field_drift.at_cell(p.cell) * inputs.mean_state.at(p)));
            v
        }),
        y: StageTable::from_fn(&spec.grid, |p| {
            let mut v = DVector::zeros(2 * n);
            v.rows_mut(0, n).copy_from(&(sh.backward_mean_field.at_cell(p.cell) * inputs.mean_state.at(p)));
            v.rows_mut(n, n).copy_from(&(-inputs.adjoint_input.at(p)));
            v
        }),
    };
    let mut initial_coupling = DMatrix::zeros(2 * n, 2 * n);
    put(&mut initial_coupling, n, 0, &sh.initial_weight);
    let mut terminal_coupling = DMatrix::zeros(2 * n, 2 * n);
    put(&mut terminal_coupling, 0, 0, &sh.terminal_map);
    put(&mut terminal_coupling, n, n, &sh.terminal_map.transpose());
    let coupling = DMatrix::identity(2 * n, 2 * n) - &terminal_coupling * &initial_coupling;
    let terminal_inverse =
        solve_linear(&coupling, &DMatrix::identity(2 * n, 2 * n), "terminal inverse").map_err(AssemblyError::Terminal)?.x;
    let tp = &spec.types[k];
    let mut initial_offset = DVector::zeros(2 * n);
    initial_offset.rows_mut(0, n).copy_from(&tp.initial_state);
    let mut terminal_offset = DVector::zeros(2 * n);
    terminal_offset.rows_mut(0, n).copy_from(&tp.terminal_offset);
    let mut index = BlockIndex::default();
    index.insert("X", Side::X, 0..n);
    index.insert("q", Side::X, n..2 * n);
    index.insert("Y", Side::Y, 0..n);
    index.insert("p", Side::Y, n..2 * n);
    index.insert("Z", Side::Z, 0..n);
    index.insert("p_bar", Side::Z, n..2 * n);
    Ok(LinearFbSystem {
        grid: spec.grid,
        dims: SystemDims { x: 2 * n, y: 2 * n, z: 2 * n },
        coefficients,
        forcing: Some(forcing),
        initial_coupling,
        terminal_coupling,
        martingale_embed: DMatrix::identity(2 * n, 2 * n),
        terminal_inverse,
        initial_offset,
        terminal_offset,
        noise: NoiseLayout {
            channels: 1,
            x_channel: vec![Some(0); 2 * n],
            y_channel: vec![Some(0); 2 * n],
            rows: (0..2 * n).collect(),
            free: (0..2 * n).collect(),
            mean_split: None,
        },
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::scalar_spec;
    use crate::numkit::{StagePoint, StagePos};

    fn inputs(spec: &ModelSpec, mean: f64, theta: f64) -> AgentInputs {
        AgentInputs {
            mean_state: StageTable::from_fn(&spec.grid, |_| DVector::from_element(1, mean)),
            adjoint_input: StageTable::from_fn(&spec.grid, |_| DVector::from_element(1, theta)),
        }
    }

    #[test]
    fn zero_mean_field_gives_zero_forcing() {
        let spec = scalar_spec([0.5, 0.1, 1.0, 0.3, 1.0, 0.0], [1.0, 0.2, 0.0, 0.3, 0.4, 0.0, 1.0, 1.0, 0.0, 0.5], 2, 1.0, 4);
        let sys = assemble_agent(&spec, 0, &inputs(&spec, 3.0, 0.0)).unwrap();
        let p = StagePoint { t: 0.25, cell: 1, pos: StagePos::Mid };
        let (fx, fy) = sys.forcing_at(p);
        assert!(fx.iter().chain(fy.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_input_sign_and_state_weight() {
        let q = 2.5;
        let spec = scalar_spec([0.5, 0.1, 1.0, 0.3, 1.0, 0.0], [1.0, 0.2, 0.7, 0.3, 0.4, 0.6, 1.0, q, 0.0, 0.5], 2, 1.0, 4);
        let sys = assemble_agent(&spec, 0, &inputs(&spec, 2.0, 0.9)).unwrap();
        // dp = -[... + Q X - Θ] dt: the bracket holds +Q against X and -Θ.
        assert_eq!(sys.at_cell(0).y_from_x[(1, 0)], q);
        let (fx, fy) = sys.forcing_at(StagePoint { t: 0.0, cell: 0, pos: StagePos::Left });
        assert_eq!(fx[0], 0.7 * 2.0);
        assert_eq!(fy[0], 0.6 * 2.0);
        assert_eq!(fy[1], -0.9);
        assert_eq!(sys.initial_coupling[(1, 0)], 0.5);
        assert_eq!(sys.terminal_coupling, DMatrix::identity(2, 2));
    }
}
