//! Classical linear-quadratic regulator for decoupled instances.

use nalgebra::{DMatrix, DVector};

use super::OracleError;
use crate::model::ModelSpec;
use crate::numkit::{rk4_integrate, solve_linear, Direction, StagePoint, TimeGridFn};

/// Feedback `u = gain · X + offset` of the regulator on every node.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalLq {
    /// Symmetric Riccati solution.
    pub riccati: TimeGridFn<DMatrix<f64>>,
    /// Affine part of the value function gradient.
    pub affine: TimeGridFn<DVector<f64>>,
    /// Feedback gain on every node.
    pub gain: Vec<DMatrix<f64>>,
    /// Feedback offset on every node.
    pub offset: Vec<DVector<f64>>,
}

impl ClassicalLq {
    /// Control at node `m` for state `x`.
    pub fn control(&self, m: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gain[m] * x + &self.offset[m]
    }
}

fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 0.0)
}

/// Solves `−P' = PA + AᵀP + Q − PB(R + DᵀPD)⁻¹BᵀP`, `P(T) = 0`, together
/// with `−p' = Aᵀp − PB(R + DᵀPD)⁻¹(Bᵀp + DᵀPσ)`, `p(T) = 0`, for type `k`
/// of a decoupled instance.
pub fn classical_lq(spec: &ModelSpec, k: usize) -> Result<ClassicalLq, OracleError> {
    let sh = &spec.shared;
    let all_zero = |f: &crate::model::MatFn| f.values().iter().all(is_zero);
    let restricted = all_zero(&sh.mean_field_drift)
        && all_zero(&sh.backward_mean_field)
        && all_zero(&sh.tracking)
        && all_zero(&sh.backward_state)
        && all_zero(&sh.backward_control)
        && is_zero(&sh.initial_weight)
        && is_zero(&sh.terminal_map);
    if !restricted {
        return Err(OracleError::Restriction("classical regulator needs F = M = S = L = K = 0, Γ = 0 and Φ = 0".into()));
    }
    let tp = spec.types.get(k).ok_or_else(|| OracleError::Restriction(format!("no type {}", k + 1)))?;
    let n = spec.dims.state;
    let d = spec.dims.control;
    let effective = |cell: usize, p: &DMatrix<f64>| -> Result<DMatrix<f64>, OracleError> {
        let dm = sh.control_diffusion.at_cell(cell);
        let rh = tp.control_weight.at_cell(cell) + dm.transpose() * p * dm;
        Ok(solve_linear(&rh, &DMatrix::identity(d, d), "effective control weight")?.x)
    };
    let failure = std::cell::RefCell::new(None);
    let rhs = |pt: StagePoint, (p, a): &(DMatrix<f64>, DVector<f64>)| {
        let c = pt.cell;
        let am = tp.drift.at_cell(c);
        let b = sh.control_drift.at_cell(c);
        let dm = sh.control_diffusion.at_cell(c);
        let sigma = tp.diffusion.at_cell(c);
        let rinv = effective(c, p).unwrap_or_else(|e| {
            failure.borrow_mut().get_or_insert(e);
            DMatrix::zeros(d, d)
        });
        let pb = p * b;
        let dp = -(p * am + am.transpose() * p + sh.state_weight.at_cell(c) - &pb * &rinv * pb.transpose());
        let da = -(am.transpose() * a - &pb * &rinv * (b.transpose() * a + dm.transpose() * p * sigma));
        (dp, da)
    };
    let sol = rk4_integrate(&spec.grid, (DMatrix::zeros(n, n), DVector::zeros(n)), Direction::Backward, rhs)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let steps = spec.grid.steps();
    let mut gain = Vec::with_capacity(steps + 1);
    let mut offset = Vec::with_capacity(steps + 1);
    for (m, (p, a)) in sol.values.iter().enumerate() {
        let c = m.min(steps - 1);
        let b = sh.control_drift.at_cell(c);
        let dm = sh.control_diffusion.at_cell(c);
        let rinv = effective(c, p)?;
        gain.push(-(&rinv * b.transpose() * p));
        offset.push(-(&rinv * (b.transpose() * a + dm.transpose() * p * tp.diffusion.at_cell(c))));
    }
    Ok(ClassicalLq {
        riccati: sol.map(|(p, _)| p.clone()),
        affine: sol.map(|(_, a)| a.clone()),
        gain,
        offset,
    })
}
