//! Small dense linear-algebra helpers for the regression-style fits.
//!
//! Problem sizes here are tiny (at most a few hundred columns), so plain
//! Cholesky / Gaussian elimination is simpler and faster than pulling in a
//! LAPACK backend.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
///
/// Returns `None` when a pivot drops below `tol` times the largest diagonal
/// entry (not positive definite to working precision).
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>, tol: f64) -> Option<Array1<f64>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(b.len(), n);
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0_f64, f64::max);
    if max_diag == 0.0 {
        return None;
    }
    // Lower-triangular factor, row major.
    let mut l = vec![0.0_f64; n * n];
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= tol * max_diag {
            return None;
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / dj;
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0_f64; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Least squares `min ||y - X b||` via normal equations.
///
/// On rank deficiency returns the offending column names (the columns whose
/// pivot vanished during elimination).
pub fn least_squares(
    x: &Array2<f64>,
    y: &Array1<f64>,
    names: &[String],
) -> Result<Array1<f64>> {
    let p = x.ncols();
    let xtx = x.t().dot(x);
    let xty = x.t().dot(y);
    match solve_spd(&xtx, &xty, 1e-12) {
        Some(b) => Ok(b),
        None => Err(Error::RankDeficient(collinear_columns(&xtx, names))),
    }
    .map(|b| {
        debug_assert_eq!(b.len(), p);
        b
    })
}

/// Identifies columns with vanishing pivots under unpivoted Cholesky; used
/// only to produce a helpful rank-deficiency message.
fn collinear_columns(xtx: &Array2<f64>, names: &[String]) -> Vec<String> {
    let n = xtx.nrows();
    let max_diag = (0..n).map(|i| xtx[[i, i]].abs()).fold(0.0_f64, f64::max);
    let mut l = vec![0.0_f64; n * n];
    let mut bad = Vec::new();
    for j in 0..n {
        let mut d = xtx[[j, j]];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 1e-12 * max_diag.max(1e-300) {
            bad.push(names.get(j).cloned().unwrap_or_else(|| format!("col{j}")));
            // Skip the column: zero out its factor row so elimination continues.
            l[j * n + j] = f64::INFINITY;
            continue;
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = xtx[[i, j]];
            for k in 0..j {
                if l[j * n + k].is_finite() && l[i * n + k].is_finite() {
                    s -= l[i * n + k] * l[j * n + k];
                }
            }
            l[i * n + j] = if dj.is_finite() { s / dj } else { 0.0 };
        }
    }
    if bad.is_empty() {
        bad.push("<unidentified>".to_string());
    }
    bad
}

/// Inverse of a symmetric positive-definite matrix, or `None` if not SPD.
pub fn inv_spd(a: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = 1.0;
        let col = solve_spd(a, &e, tol)?;
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    Some(inv)
}
