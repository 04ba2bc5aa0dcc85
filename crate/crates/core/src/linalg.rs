//! Dense Cholesky factorization with leading-minor diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor `L` of a symmetric matrix, `A = L L^T`.
///
/// Only the lower triangle of `a` is read. Fails with [`Error::NotSpd`]
/// naming the first leading minor whose pivot is not positive.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::mismatch("square matrix columns", n, a.ncols()));
    }
    // Column i of `rows` holds row i of L, so the inner products below walk
    // contiguous memory.
    let mut rows = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let dot = {
                let ri = &rows.as_slice()[i * n..i * n + j];
                let rj = &rows.as_slice()[j * n..j * n + j];
                ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>()
            };
            let s = a[(i, j)] - dot;
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotSpd { index: i, pivot: s });
                }
                rows[(i, i)] = s.sqrt();
            } else {
                rows[(j, i)] = s / rows[(j, j)];
            }
        }
    }
    Ok(rows.transpose())
}

/// Solves `L L^T x = b` given the lower factor.
pub fn cholesky_solve(lower: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = lower
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal");
    lower
        .tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has a positive diagonal")
}
