//! Small dense routines for symmetric positive-definite matrices.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("cholesky", format!("{}x{} is not square", n, a.ncols())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let root = diag.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / root;
        }
    }
    Ok(l)
}

/// `log det A` from a Cholesky factor.
pub fn logdet_from_cholesky(l: ArrayView2<'_, f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Inverse of `A = L Lᵀ` from its Cholesky factor.
pub fn inverse_from_cholesky(l: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        for i in col..n {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                v -= l[[i, k]] * linv[[k, col]];
            }
            linv[[i, col]] = v / l[[i, i]];
        }
    }
    linv.t().dot(&linv)
}

/// Log-determinant and inverse of a symmetric positive-definite matrix.
pub fn logdet_spd(a: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let l = cholesky(a)?;
    Ok((logdet_from_cholesky(l.view()), inverse_from_cholesky(l.view())))
}
