//! Configuration builders shared by the integration tests.

#![allow(dead_code)]

use mflq::model::{parse_str, ModelSpec};
use serde_json::json;

/// Scalar per-type coefficients.
#[derive(Clone, Copy, Debug)]
pub struct ScalarType {
    pub drift: f64,
    pub backward_drift: f64,
    pub control_weight: f64,
    pub sigma: f64,
    pub initial: f64,
    pub terminal_offset: f64,
}

/// Scalar shared coefficients.
#[derive(Clone, Copy, Debug)]
pub struct ScalarShared {
    pub b: f64,
    pub d: f64,
    pub f: f64,
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub phi: f64,
    pub q: f64,
    pub s: f64,
    pub gamma: f64,
}

pub const BENCH_TYPE: ScalarType =
    ScalarType { drift: 0.2, backward_drift: -0.1, control_weight: 1.0, sigma: 0.3, initial: 1.0, terminal_offset: 0.1 };

pub const BENCH_SHARED: ScalarShared =
    ScalarShared { b: 1.0, d: 0.2, f: 0.3, k: 0.1, l: 0.1, m: 0.2, phi: 0.5, q: 1.0, s: 0.3, gamma: 0.2 };

/// Builds a scalar configuration with the given type counts.
pub fn scalar_config(types: &[ScalarType], sh: ScalarShared, counts: &[usize], horizon: f64, steps: usize) -> String {
    let total: usize = counts.iter().sum();
    let pi: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let types: Vec<_> = types
        .iter()
        .map(|t| {
            json!({"A": t.drift, "H": t.backward_drift, "R": t.control_weight, "sigma": [t.sigma],
                   "xi0": [t.initial], "eta": [t.terminal_offset]})
        })
        .collect();
    json!({
        "dims": {"n": 1, "d": 1, "K": counts.len(), "N": total},
        "types": types,
        "shared": {"B": sh.b, "D": sh.d, "F": sh.f, "Kcoef": sh.k, "L": sh.l, "M": sh.m,
                   "Phi": sh.phi, "Q": sh.q, "S": sh.s, "Gamma": sh.gamma},
        "population": {"counts": counts, "pi": pi},
        "grid": {"T": horizon, "steps": steps}
    })
    .to_string()
}

/// Parses a configuration built by [`scalar_config`].
pub fn scalar_spec(types: &[ScalarType], sh: ScalarShared, counts: &[usize], horizon: f64, steps: usize) -> ModelSpec {
    parse_str(&scalar_config(types, sh, counts, horizon, steps)).expect("valid configuration")
}
