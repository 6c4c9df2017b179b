//! Dense linear solves with a condition diagnostic.

use nalgebra::DMatrix;

use super::expm::norm1;
use super::NumError;

/// Condition number above which a system counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Solution of a linear system together with its conditioning.
#[derive(Clone, Debug)]
pub struct Solved {
    /// Solution `X` of `A X = B`.
    pub x: DMatrix<f64>,
    /// 1-norm condition number of `A`.
    pub cond: f64,
}

/// 1-norm condition number `‖A‖₁ ‖A⁻¹‖₁`, infinite when `A` is singular.
pub fn condition_1norm(a: &DMatrix<f64>) -> f64 {
    if !a.is_square() {
        return f64::INFINITY;
    }
    match a.clone().try_inverse() {
        Some(inv) => norm1(a) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Solves `A X = B` by LU with partial pivoting.
///
/// The condition number is computed exactly in the 1-norm (the systems met
/// here are small and dense). A condition above [`SINGULAR_CONDITION`] is an
/// error naming `context`. One step of iterative refinement is applied.
pub fn solve_linear(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<Solved, NumError> {
    if !a.is_square() {
        return Err(NumError::NonSquare { rows: a.nrows(), cols: a.ncols() });
    }
    if a.nrows() != b.nrows() {
        return Err(NumError::Dimension(format!(
            "{context}: matrix has {} rows but right-hand side has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let singular = |cond: f64| NumError::Singular { context: context.to_string(), cond };
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(singular(f64::INFINITY));
    }
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or_else(|| singular(f64::INFINITY))?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > SINGULAR_CONDITION {
        return Err(singular(cond));
    }
    let mut x = lu.solve(b).ok_or_else(|| singular(cond))?;
    let residual = b - a * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    Ok(Solved { x, cond })
}
