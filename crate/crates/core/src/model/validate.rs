//! Checks of the standing assumptions on a [`ModelSpec`].

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::{MatFn, ModelSpec};

/// Smallest admissible eigenvalue of the control weight.
pub const CONTROL_WEIGHT_FLOOR: f64 = 1e-10;
/// Relative tolerance for symmetry and semidefiniteness checks.
const SYMMETRY_TOL: f64 = 1e-10;
/// Tolerance on probability vectors summing to one.
const SUM_TOL: f64 = 1e-9;

/// One violated assumption.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// Which assumption failed.
    pub message: String,
    /// Offending coefficient, e.g. `R1` or `Q`.
    pub coefficient: String,
    /// Grid time at which the violation was found, if time dependent.
    pub time: Option<f64>,
    /// Offending value in row-major order, if a matrix.
    pub value: Option<Vec<Vec<f64>>>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}", self.message, self.coefficient)?;
        if let Some(t) = self.time {
            write!(f, " at t = {t}")?;
        }
        if let Some(v) = &self.value {
            write!(f, ", value {v:?}")?;
        }
        write!(f, ")")
    }
}

/// Outcome of [`validate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Violated assumptions; empty on pass.
    pub violations: Vec<Violation>,
    /// Largest deviation of the empirical type distribution from the limit.
    pub eps_n: f64,
    /// Smallest eigenvalue of any control weight over the grid.
    pub min_control_eigenvalue: f64,
}

impl ValidationReport {
    /// True when no assumption is violated.
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            writeln!(f, "pass")?;
        } else {
            writeln!(f, "fail")?;
            for v in &self.violations {
                writeln!(f, "  {v}")?;
            }
        }
        writeln!(f, "eps_N = {:.6e}", self.eps_n)?;
        write!(f, "min eig R = {:.6e}", self.min_control_eigenvalue)
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn scale(m: &DMatrix<f64>) -> f64 {
    m.amax().max(1.0)
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale(m)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Values of `f` with the grid time they apply from; a constant coefficient
/// is reported at the first grid time.
fn nodes_of<'a>(spec: &ModelSpec, f: &'a MatFn) -> Vec<(Option<f64>, &'a DMatrix<f64>)> {
    if f.is_const() {
        vec![(Some(spec.grid.time(0)), f.at_cell(0))]
    } else {
        (0..spec.grid.steps()).map(|c| (Some(spec.grid.time(c)), f.at_cell(c))).collect()
    }
}

struct Collector {
    violations: Vec<Violation>,
}

impl Collector {
    fn push(&mut self, message: &str, coefficient: &str, time: Option<f64>, value: Option<&DMatrix<f64>>) {
        self.violations.push(Violation {
            message: message.to_string(),
            coefficient: coefficient.to_string(),
            time,
            value: value.map(rows),
        });
    }

    fn finite(&mut self, name: &str, time: Option<f64>, m: &DMatrix<f64>) -> bool {
        if m.iter().all(|x| x.is_finite()) {
            true
        } else {
            self.push("non-finite entry", name, time, Some(m));
            false
        }
    }

    fn semidefinite(&mut self, label: &str, name: &str, time: Option<f64>, m: &DMatrix<f64>) {
        if !self.finite(name, time, m) {
            return;
        }
        if !is_symmetric(m) {
            self.push(&format!("{label} not symmetric"), name, time, Some(m));
        } else if min_eigenvalue(m) < -SYMMETRY_TOL * scale(m) {
            self.push(&format!("{label} not positive semidefinite"), name, time, Some(m));
        }
    }
}

/// Checks the standing assumptions and reports every violation found.
///
/// Control weights must be symmetric with smallest eigenvalue at least
/// [`CONTROL_WEIGHT_FLOOR`] at every grid cell; the state weight and the
/// initial weight must be symmetric positive semidefinite; the type
/// distributions must be probability vectors with a positive limit, every
/// type must be populated, and every entry must be finite.
pub fn validate(spec: &ModelSpec) -> ValidationReport {
    let mut c = Collector { violations: Vec::new() };
    let mut min_eig = f64::INFINITY;

    for (k, tp) in spec.types.iter().enumerate() {
        let name = format!("R{}", k + 1);
        for (t, r) in nodes_of(spec, &tp.control_weight) {
            if !c.finite(&name, t, r) {
                continue;
            }
            let e = min_eigenvalue(r);
            min_eig = min_eig.min(e);
            if !is_symmetric(r) {
                c.push("R not symmetric", &name, t, Some(r));
            } else if e < CONTROL_WEIGHT_FLOOR {
                c.push("R not uniformly positive definite", &name, t, Some(r));
            }
        }
        for (label, f) in [("A", &tp.drift), ("H", &tp.backward_drift)] {
            let name = format!("{label}{}", k + 1);
            for (t, m) in nodes_of(spec, f) {
                c.finite(&name, t, m);
            }
        }
        let name = format!("sigma{}", k + 1);
        for (cell, v) in tp.diffusion.values().iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                let t = (!tp.diffusion.is_const()).then(|| spec.grid.time(cell));
                c.push("non-finite entry", &name, t, None);
            }
        }
        let initial = tp.initial_state.iter().chain(tp.terminal_offset.iter());
        let spread = tp.initial_spread.iter().flat_map(|s| s.iter());
        if initial.chain(spread.clone()).any(|x| !x.is_finite()) {
            c.push("non-finite entry", &format!("xi0/eta/xi_std{}", k + 1), None, None);
        }
        if spread.clone().any(|&x| x < 0.0) {
            c.push("negative initial spread", &format!("xi_std{}", k + 1), None, None);
        }
    }

    let s = &spec.shared;
    for (t, q) in nodes_of(spec, &s.state_weight) {
        c.semidefinite("Q", "Q", t, q);
    }
    c.semidefinite("Gamma", "Gamma", None, &s.initial_weight);
    for (name, f) in [
        ("B", &s.control_drift),
        ("D", &s.control_diffusion),
        ("F", &s.mean_field_drift),
        ("Kcoef", &s.backward_control),
        ("L", &s.backward_state),
        ("M", &s.backward_mean_field),
        ("S", &s.tracking),
    ] {
        for (t, m) in nodes_of(spec, f) {
            c.finite(name, t, m);
        }
    }
    c.finite("Phi", None, &s.terminal_map);

    let pop = &spec.population;
    let pi_sum: f64 = pop.pi.iter().sum();
    if pop.pi.iter().any(|p| !p.is_finite()) || (pi_sum - 1.0).abs() > SUM_TOL {
        c.push("pi does not sum to 1", "pi", None, None);
    }
    if pop.pi.iter().any(|&p| p <= 0.0) {
        c.push("pi has a non-positive entry", "pi", None, None);
    }
    let pin_sum: f64 = pop.pi_n.iter().sum();
    if (pin_sum - 1.0).abs() > SUM_TOL {
        c.push("pi_N does not sum to 1", "pi_N", None, None);
    }
    for (k, &n_k) in pop.counts().iter().enumerate() {
        if n_k == 0 {
            c.push(&format!("type {} has no agents", k + 1), "theta", None, None);
        }
    }

    ValidationReport { violations: c.violations, eps_n: pop.eps_n, min_control_eigenvalue: min_eig }
}
