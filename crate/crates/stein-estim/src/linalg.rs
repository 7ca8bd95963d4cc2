//! Small dense linear algebra for symmetric systems.
//!
//! Parameter dimensions here are tiny (m <= ~60), so a hand-rolled Cholesky
//! and a Jacobi eigensolver keep the crate free of external BLAS/LAPACK
//! linkage while staying exact enough for the tolerances used in tests.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Symmetrize in place: `a <- (a + a^T) / 2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Cholesky factor L (lower) of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::config("cholesky: matrix must be square"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::numeric(format!(
                        "cholesky: matrix not positive definite (pivot {s:.3e} at {i})"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Solve with a precomputed factor.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `a x = b` after adding a ridge `lambda * I`. The caller chooses
/// `lambda`; pass 0.0 for a plain solve.
pub fn solve_regularized(a: &Array2<f64>, b: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if lambda == 0.0 {
        return solve_spd(a, b);
    }
    let mut ar = a.clone();
    for i in 0..ar.nrows() {
        ar[[i, i]] += lambda;
    }
    solve_spd(&ar, b)
}

/// Default relative ridge for near-singular information matrices:
/// `1e-6 * trace(a) / m`, floored at `1e-12`.
pub fn default_ridge(a: &Array2<f64>) -> f64 {
    let n = a.nrows().max(1);
    let tr: f64 = (0..a.nrows()).map(|i| a[[i, i]]).sum();
    (1e-6 * tr.abs() / n as f64).max(1e-12)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn inverse_spd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        inv.column_mut(j).assign(&col);
    }
    // Clean up asymmetry from the columnwise solves.
    symmetrize(&mut inv);
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn eigvals_symmetric(a: &Array2<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::config("eigvals: matrix must be square"));
    }
    let mut m = a.clone();
    symmetrize(&mut m);
    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| m[[i, i]].abs()).fold(1.0, f64::max);
    let tol = (1e-14 * scale) * (1e-14 * scale) * (n * n) as f64;
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ev)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigval_symmetric(a: &Array2<f64>) -> Result<f64> {
    let ev = eigvals_symmetric(a)?;
    ev.first()
        .copied()
        .ok_or_else(|| Error::config("min_eigval: empty matrix"))
}
