//! Configuration text survives a parse/emit round trip.

mod common;

use common::{scalar_config, ScalarShared, ScalarType};
use mflq::model::{emit_string, parse_str, validate, ModelError};
use proptest::prelude::*;

fn scalar_type() -> impl Strategy<Value = ScalarType> {
    (-1.0..1.0f64, -1.0..1.0f64, 0.1..3.0f64, 0.0..1.0f64, -2.0..2.0f64, -1.0..1.0f64).prop_map(|(a, h, r, s, x, e)| ScalarType {
        drift: a,
        backward_drift: h,
        control_weight: r,
        sigma: s,
        initial: x,
        terminal_offset: e,
    })
}

fn scalar_shared() -> impl Strategy<Value = ScalarShared> {
    (prop::array::uniform10(-1.0..1.0f64), 0.0..2.0f64).prop_map(|(c, q)| ScalarShared {
        b: c[0],
        d: c[1],
        f: c[2],
        k: c[3],
        l: c[4],
        m: c[5],
        phi: c[6],
        q,
        s: c[8],
        gamma: c[9].abs(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emitted_text_parses_to_the_same_instance(
        types in prop::collection::vec(scalar_type(), 1..=3),
        sh in scalar_shared(),
        steps in 2usize..40,
        horizon in 0.1..3.0f64,
    ) {
        let counts: Vec<usize> = (1..=types.len()).collect();
        let spec = parse_str(&scalar_config(&types, sh, &counts, horizon, steps)).unwrap();
        let again = parse_str(&emit_string(&spec)).unwrap();
        prop_assert_eq!(&again, &spec);
        prop_assert_eq!(emit_string(&again), emit_string(&spec));
    }

    #[test]
    fn exact_type_counts_give_zero_eps(counts in prop::collection::vec(1usize..6, 1..=3)) {
        let ty = common::BENCH_TYPE;
        let types = vec![ty; counts.len()];
        let spec = parse_str(&scalar_config(&types, common::BENCH_SHARED, &counts, 1.0, 4)).unwrap();
        prop_assert_eq!(validate(&spec).eps_n, 0.0);
        prop_assert_eq!(spec.population.counts(), counts);
    }
}

#[test]
fn tabulated_matrix_coefficients_round_trip() {
    let text = r#"{
        "dims": {"n": 2, "d": 1, "K": 1, "N": 3},
        "types": [{"A": [[[0.1, 0.0], [0.2, -0.3]], [[0.0, 0.1], [0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]],
                   "H": [[0.0, 0.0], [0.0, 0.0]], "R": 1.0,
                   "sigma": [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], "xi0": [1.0, -1.0], "eta": [0.0, 0.5],
                   "xi_std": [0.1, 0.0]}],
        "shared": {"B": [[1.0], [0.5]], "D": [[0.0], [0.1]], "F": [[0.1, 0.0], [0.0, 0.1]],
                   "Kcoef": [[0.0], [0.0]], "L": [[0.0, 0.0], [0.0, 0.0]], "M": [[0.0, 0.0], [0.0, 0.0]],
                   "Phi": [[1.0, 0.0], [0.0, 1.0]], "Q": [[1.0, 0.0], [0.0, 1.0]],
                   "S": [[0.0, 0.0], [0.0, 0.0]], "Gamma": [[0.0, 0.0], [0.0, 0.0]]},
        "population": {"theta": [1, 1, 1]},
        "grid": {"T": 1.5, "steps": 3}
    }"#;
    let spec = parse_str(text).unwrap();
    assert_eq!(spec.dims.state, 2);
    assert!(spec.has_random_initial());
    assert!(!spec.is_time_invariant());
    assert_eq!(parse_str(&emit_string(&spec)).unwrap(), spec);
}

#[test]
fn syntax_errors_report_their_position() {
    let err = parse_str("{\n  \"dims\": [1,\n").unwrap_err();
    match err {
        ModelError::Parse { path, .. } => assert!(path.starts_with("line "), "{path}"),
        other => panic!("unexpected {other}"),
    }
}
