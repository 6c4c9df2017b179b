//! Recovery of the martingale integrand from the decoupling field.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{LinearFbSystem, Transformed};
use crate::numkit::{solve_linear, NumError};

/// The linear map `x̃ ↦ z` implied by a decoupling field at one instant,
/// together with the factorization needed for its affine part.
///
/// Matching martingale parts of `y = φ x̃ + ψ` gives
/// `(φ D2 - E) z = -φ [(C + cd φ) x̃ + cd ψ + C ξ + s0]`. The matrix
/// `φ D2 - E` is not square in general; the equation is imposed on the
/// backward rows that carry martingale parts and solved for the free
/// integrand coordinates, as described by the system's noise layout.
#[derive(Clone, Debug)]
pub struct Decoupling {
    inverse: DMatrix<f64>,
    /// Condition number of the restricted matching matrix.
    pub cond: f64,
    /// Gain `K` with `z = K x̃ + k` (`z × x`).
    pub gain: DMatrix<f64>,
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

impl Decoupling {
    /// Restricted matching matrix `(φ D2 - E)[rows, free]`.
    pub fn matching_matrix(sys: &LinearFbSystem, tr: &Transformed, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let full = phi * &tr.d2 - &sys.martingale_embed;
        let (rows, free) = (&sys.noise.rows, &sys.noise.free);
        DMatrix::from_fn(rows.len(), free.len(), |i, j| full[(rows[i], free[j])])
    }

    /// Factorizes the matching matrix and computes the gain.
    pub fn new(sys: &LinearFbSystem, tr: &Transformed, phi: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self, NumError> {
        let m = Self::matching_matrix(sys, tr, phi);
        let k = m.nrows();
        let solved = solve_linear(&m, &DMatrix::identity(k, k), "integrand matching")?;
        let lin = phi * (c + &tr.cd * phi);
        let w = -(&solved.x * select_rows(&lin, &sys.noise.rows));
        let gain = embed_linear(sys, &w);
        Ok(Self { inverse: solved.x, cond: solved.cond, gain })
    }

    /// Affine part `k` of the integrand for offset `ψ`.
    pub fn offset(&self, sys: &LinearFbSystem, tr: &Transformed, phi: &DMatrix<f64>, psi: &DVector<f64>) -> DVector<f64> {
        let aff = phi * (&tr.cd * psi + &tr.diff_offset);
        let rows = &sys.noise.rows;
        let rhs = DVector::from_fn(rows.len(), |i, _| aff[rows[i]]);
        let w = -(&self.inverse * rhs);
        let target = match &sys.noise.mean_split {
            Some(split) => &split.z_mean,
            None => &sys.noise.free,
        };
        let mut out = DVector::zeros(sys.dims.z);
        for (j, &zj) in target.iter().enumerate() {
            out[zj] = w[j];
        }
        out
    }

    /// Largest violation of the matching equation on the backward rows that
    /// were not imposed, for the linear part.
    pub fn ignored_row_defect(&self, sys: &LinearFbSystem, tr: &Transformed, phi: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
        let full = (phi * &tr.d2 - &sys.martingale_embed) * &self.gain + phi * (c + &tr.cd * phi);
        (0..sys.dims.y)
            .filter(|r| !sys.noise.rows.contains(r))
            .map(|r| full.row(r).amax())
            .fold(0.0, f64::max)
    }
}

/// Places the solved integrand map into the full integrand vector.
fn embed_linear(sys: &LinearFbSystem, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut gain = DMatrix::zeros(sys.dims.z, sys.dims.x);
    match &sys.noise.mean_split {
        Some(split) => {
            let mut is_mean = vec![false; sys.dims.x];
            for &c in &split.x_mean {
                is_mean[c] = true;
            }
            for (j, (&zf, &zm)) in sys.noise.free.iter().zip(&split.z_mean).enumerate() {
                for c in 0..sys.dims.x {
                    let target = if is_mean[c] { zm } else { zf };
                    gain[(target, c)] = w[(j, c)];
                }
            }
        }
        None => {
            for (j, &zf) in sys.noise.free.iter().enumerate() {
                gain.row_mut(zf).copy_from(&w.row(j));
            }
        }
    }
    gain
}
