//! JSON configuration format.
//!
//! ```text
//! {
//!   "dims":   {"n": 1, "d": 1, "K": 1, "N": 40},
//!   "types":  [{"A": [[0.2]], "H": [[-0.3]], "R": [[1.0]], "sigma": [1.0],
//!               "xi0": [0.2], "eta": [0.1], "xi_std": [0.0]}],
//!   "shared": {"B": ..., "D": ..., "F": ..., "Kcoef": ..., "L": ..., "M": ...,
//!              "Phi": ..., "Q": ..., "S": ..., "Gamma": ...},
//!   "population": {"counts": [40], "pi": [1.0]},
//!   "grid":   {"T": 1.0, "steps": 50}
//! }
//! ```
//!
//! Matrices are row-major nested arrays and vectors are flat arrays. A
//! time-varying coefficient is an array of `steps` such values, one per grid
//! cell. A bare number is accepted wherever a 1×1 matrix or a length-1 vector
//! is expected. `population.theta` lists one-based agent types; `xi_std` is
//! optional and switches the type to random initial states.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use super::{Grid, MatFn, ModelError, ModelSpec, Population, SharedParams, TimeFn, TypeParams, VecFn};

fn err(path: &str, message: impl Into<String>) -> ModelError {
    ModelError::Parse { path: path.to_string(), message: message.into() }
}

fn field<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value, ModelError> {
    obj.get(key).ok_or_else(|| err(&format!("{path}.{key}"), "missing field"))
}

fn number(v: &Value, path: &str) -> Result<f64, ModelError> {
    v.as_f64().ok_or_else(|| err(path, format!("expected a number, found {}", kind(v))))
}

fn count(v: &Value, path: &str) -> Result<usize, ModelError> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| err(path, format!("expected a non-negative integer, found {}", kind(v))))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, ModelError> {
    v.as_array().ok_or_else(|| err(path, format!("expected an array, found {}", kind(v))))
}

/// Nesting depth of arrays: 0 for a number, 1 for a flat array, and so on.
fn depth(v: &Value) -> usize {
    match v {
        Value::Array(items) => 1 + items.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

fn parse_vector(v: &Value, path: &str) -> Result<DVector<f64>, ModelError> {
    if v.is_number() {
        return Ok(DVector::from_element(1, number(v, path)?));
    }
    let items = array(v, path)?;
    let data = items.iter().enumerate().map(|(i, x)| number(x, &format!("{path}[{i}]"))).collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(data))
}

fn parse_matrix(v: &Value, path: &str) -> Result<DMatrix<f64>, ModelError> {
    if v.is_number() {
        return Ok(DMatrix::from_element(1, 1, number(v, path)?));
    }
    let rows = array(v, path)?;
    if rows.is_empty() {
        return Err(err(path, "empty matrix"));
    }
    let mut data = Vec::new();
    let mut width = None;
    for (i, row) in rows.iter().enumerate() {
        let rp = format!("{path}[{i}]");
        let cells = array(row, &rp)?;
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(err(&rp, "rows have different lengths"));
        }
        for (j, x) in cells.iter().enumerate() {
            data.push(number(x, &format!("{rp}[{j}]"))?);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), width.unwrap_or(0), &data))
}

fn parse_matfn(v: &Value, path: &str) -> Result<MatFn, ModelError> {
    if depth(v) == 3 {
        let items = array(v, path)?;
        let table = items.iter().enumerate().map(|(i, m)| parse_matrix(m, &format!("{path}[{i}]"))).collect::<Result<_, _>>()?;
        Ok(TimeFn::Table(table))
    } else {
        Ok(TimeFn::Const(parse_matrix(v, path)?))
    }
}

fn parse_vecfn(v: &Value, path: &str) -> Result<VecFn, ModelError> {
    if depth(v) == 2 {
        let items = array(v, path)?;
        let table = items.iter().enumerate().map(|(i, x)| parse_vector(x, &format!("{path}[{i}]"))).collect::<Result<_, _>>()?;
        Ok(TimeFn::Table(table))
    } else {
        Ok(TimeFn::Const(parse_vector(v, path)?))
    }
}

fn parse_pi(v: &Value, path: &str) -> Result<Vec<f64>, ModelError> {
    Ok(parse_vector(v, path)?.iter().copied().collect())
}

/// Parses a configuration document.
pub fn parse(doc: &Value) -> Result<ModelSpec, ModelError> {
    let dims = field(doc, "dims", "$")?;
    let n = count(field(dims, "n", "$.dims")?, "$.dims.n")?;
    let d = count(field(dims, "d", "$.dims")?, "$.dims.d")?;
    let k = count(field(dims, "K", "$.dims")?, "$.dims.K")?;
    let agents = count(field(dims, "N", "$.dims")?, "$.dims.N")?;

    let grid_v = field(doc, "grid", "$")?;
    let horizon = number(field(grid_v, "T", "$.grid")?, "$.grid.T")?;
    let steps = count(field(grid_v, "steps", "$.grid")?, "$.grid.steps")?;
    let grid = Grid::new(horizon, steps)?;

    let types_v = array(field(doc, "types", "$")?, "$.types")?;
    if types_v.len() != k {
        return Err(err("$.types", format!("{} entries for K = {k}", types_v.len())));
    }
    let mut types = Vec::with_capacity(k);
    for (i, t) in types_v.iter().enumerate() {
        let p = format!("$.types[{i}]");
        let f = |key: &str| field(t, key, &p);
        let q = |key: &str| format!("{p}.{key}");
        types.push(TypeParams {
            drift: parse_matfn(f("A")?, &q("A"))?,
            backward_drift: parse_matfn(f("H")?, &q("H"))?,
            control_weight: parse_matfn(f("R")?, &q("R"))?,
            diffusion: parse_vecfn(f("sigma")?, &q("sigma"))?,
            initial_state: parse_vector(f("xi0")?, &q("xi0"))?,
            terminal_offset: parse_vector(f("eta")?, &q("eta"))?,
            initial_spread: t.get("xi_std").map(|v| parse_vector(v, &q("xi_std"))).transpose()?,
        });
    }

    let sh = field(doc, "shared", "$")?;
    let g = |key: &str| field(sh, key, "$.shared");
    let q = |key: &str| format!("$.shared.{key}");
    let shared = SharedParams {
        control_drift: parse_matfn(g("B")?, &q("B"))?,
        control_diffusion: parse_matfn(g("D")?, &q("D"))?,
        mean_field_drift: parse_matfn(g("F")?, &q("F"))?,
        backward_control: parse_matfn(g("Kcoef")?, &q("Kcoef"))?,
        backward_state: parse_matfn(g("L")?, &q("L"))?,
        backward_mean_field: parse_matfn(g("M")?, &q("M"))?,
        terminal_map: parse_matrix(g("Phi")?, &q("Phi"))?,
        state_weight: parse_matfn(g("Q")?, &q("Q"))?,
        tracking: parse_matfn(g("S")?, &q("S"))?,
        initial_weight: parse_matrix(g("Gamma")?, &q("Gamma"))?,
    };

    let pop = field(doc, "population", "$")?;
    let pi = match pop.get("pi") {
        Some(v) => Some(parse_pi(v, "$.population.pi")?),
        None => None,
    };
    let population = if let Some(theta_v) = pop.get("theta") {
        let theta = array(theta_v, "$.population.theta")?
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let path = format!("$.population.theta[{i}]");
                let t = count(x, &path)?;
                t.checked_sub(1).ok_or_else(|| err(&path, "types are one-based"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pi = match pi {
            Some(pi) => pi,
            None => empirical(&theta, k),
        };
        Population::from_theta(theta, pi)?
    } else if let Some(counts_v) = pop.get("counts") {
        let counts = array(counts_v, "$.population.counts")?
            .iter()
            .enumerate()
            .map(|(i, x)| count(x, &format!("$.population.counts[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let pi = match pi {
            Some(pi) => pi,
            None => {
                let total: usize = counts.iter().sum();
                counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
            }
        };
        Population::from_counts(&counts, pi)?
    } else {
        return Err(err("$.population", "either `theta` or `counts` is required"));
    };
    if population.theta.len() != agents {
        return Err(err("$.dims.N", format!("N = {agents} but the population lists {} agents", population.theta.len())));
    }
    let spec = ModelSpec::new(types, shared, population, grid)?;
    if spec.dims.state != n || spec.dims.control != d {
        return Err(err("$.dims", format!("declared n = {n}, d = {d} but coefficients have n = {}, d = {}", spec.dims.state, spec.dims.control)));
    }
    Ok(spec)
}

fn empirical(theta: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0.0; k];
    for &t in theta {
        if t < k {
            counts[t] += 1.0;
        }
    }
    counts.iter().map(|c| c / theta.len().max(1) as f64).collect()
}

/// Parses configuration text, reporting syntax errors with line and column.
pub fn parse_str(text: &str) -> Result<ModelSpec, ModelError> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| err(&format!("line {}, column {}", e.line(), e.column()), e.to_string()))?;
    parse(&doc)
}

fn emit_matrix(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| Value::Array((0..m.ncols()).map(|j| json!(m[(i, j)])).collect())).collect())
}

fn emit_vector(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|x| json!(x)).collect())
}

fn emit_matfn(f: &MatFn) -> Value {
    match f {
        TimeFn::Const(m) => emit_matrix(m),
        TimeFn::Table(ms) => Value::Array(ms.iter().map(emit_matrix).collect()),
    }
}

fn emit_vecfn(f: &VecFn) -> Value {
    match f {
        TimeFn::Const(v) => emit_vector(v),
        TimeFn::Table(vs) => Value::Array(vs.iter().map(emit_vector).collect()),
    }
}

/// Serializes a spec into the configuration format.
pub fn emit(spec: &ModelSpec) -> Value {
    let types: Vec<Value> = spec
        .types
        .iter()
        .map(|t| {
            let mut m = Map::new();
            m.insert("A".into(), emit_matfn(&t.drift));
            m.insert("H".into(), emit_matfn(&t.backward_drift));
            m.insert("R".into(), emit_matfn(&t.control_weight));
            m.insert("sigma".into(), emit_vecfn(&t.diffusion));
            m.insert("xi0".into(), emit_vector(&t.initial_state));
            m.insert("eta".into(), emit_vector(&t.terminal_offset));
            if let Some(s) = &t.initial_spread {
                m.insert("xi_std".into(), emit_vector(s));
            }
            Value::Object(m)
        })
        .collect();
    let s = &spec.shared;
    json!({
        "dims": {"n": spec.dims.state, "d": spec.dims.control, "K": spec.dims.types, "N": spec.dims.agents},
        "types": types,
        "shared": {
            "B": emit_matfn(&s.control_drift),
            "D": emit_matfn(&s.control_diffusion),
            "F": emit_matfn(&s.mean_field_drift),
            "Kcoef": emit_matfn(&s.backward_control),
            "L": emit_matfn(&s.backward_state),
            "M": emit_matfn(&s.backward_mean_field),
            "Phi": emit_matrix(&s.terminal_map),
            "Q": emit_matfn(&s.state_weight),
            "S": emit_matfn(&s.tracking),
            "Gamma": emit_matrix(&s.initial_weight),
        },
        "population": {
            "theta": spec.population.theta.iter().map(|t| t + 1).collect::<Vec<_>>(),
            "pi": spec.population.pi,
        },
        "grid": {"T": spec.grid.horizon(), "steps": spec.grid.steps()},
    })
}

/// Serializes a spec as pretty-printed JSON text.
pub fn emit_string(spec: &ModelSpec) -> String {
    serde_json::to_string_pretty(&emit(spec)).unwrap_or_default()
}
