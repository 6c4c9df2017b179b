//! Matrix exponential by scaling and squaring with diagonal Padé approximants.

use nalgebra::DMatrix;

use super::NumError;

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm bounds below which each approximant is accurate to unit roundoff.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

pub(crate) fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Odd and even parts of a low-order approximant built from powers of `a`.
fn low_order(a: &DMatrix<f64>, coeffs: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let mut power = DMatrix::identity(n, n);
    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for pair in coeffs.chunks(2) {
        v += &power * pair[0];
        u += &power * pair[1];
        power = &power * &a2;
    }
    (a * u, v)
}

fn order13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// Matrix exponential `e^A`.
///
/// Uses the smallest diagonal Padé approximant of degree 3, 5, 7, 9 or 13
/// that is accurate for the 1-norm of `A`, after scaling `A` by a power of
/// two when needed, followed by repeated squaring.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumError> {
    if !a.is_square() {
        return Err(NumError::NonSquare { rows: a.nrows(), cols: a.ncols() });
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm = norm1(a);
    let (u, v, squarings) = match THETA.iter().find(|(_, theta)| norm <= *theta) {
        Some(&(order, _)) => {
            let coeffs: &[f64] = match order {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let (u, v) = low_order(a, coeffs);
            (u, v, 0)
        }
        None => {
            let s = if norm > THETA13 { (norm / THETA13).log2().ceil().max(0.0) as i32 } else { 0 };
            let scaled = a / 2f64.powi(s);
            let (u, v) = order13(&scaled);
            (u, v, s)
        }
    };
    let p = &v + &u;
    let q = &v - &u;
    let lu = q.lu();
    let mut r = lu.solve(&p).ok_or_else(|| NumError::Singular { context: "matrix exponential".into(), cond: f64::INFINITY })?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gives_identity() {
        assert_eq!(expm(&DMatrix::zeros(3, 3)).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn diagonal_case() {
        let e = expm(&DMatrix::from_diagonal(&nalgebra::dvector![1.0, -1.0])).unwrap();
        assert_relative_eq!(e[(0, 0)], std::f64::consts::E, max_relative = 1e-14);
        assert_relative_eq!(e[(1, 1)], (-1f64).exp(), max_relative = 1e-14);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn nilpotent_case() {
        let e = expm(&nalgebra::dmatrix![0.0, 1.0; 0.0, 0.0]).unwrap();
        assert_relative_eq!(e, nalgebra::dmatrix![1.0, 1.0; 0.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn rotation_generator() {
        for &theta in &[1e-4, 0.1, 0.9, 2.0, 4.0, 9.0] {
            let e = expm(&nalgebra::dmatrix![0.0, -theta; theta, 0.0]).unwrap();
            assert_relative_eq!(e[(0, 0)], theta.cos(), epsilon = 1e-13);
            assert_relative_eq!(e[(1, 0)], theta.sin(), epsilon = 1e-13);
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(expm(&DMatrix::zeros(2, 3)), Err(NumError::NonSquare { .. })));
    }
}
