//! Small dense linear algebra for symmetric matrices.
//!
//! Embedding dimensions in this crate stay below ~32, so direct cyclic
//! Jacobi iteration is exact enough and keeps the crate free of external
//! BLAS/LAPACK linkage.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns, so
/// `a ≈ v · diag(λ) · vᵀ`. Eigenvalues are unsorted.
pub fn sym_eig(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Contract(format!(
            "sym_eig expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        return Ok((m.diag().to_owned(), v));
    }

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob_norm(a)) {
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
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
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
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok((m.diag().to_owned(), v))
}

/// Frobenius norm.
pub fn frob_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Symmetrize in place: `(a + aᵀ) / 2`.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    (a + &a.t()) * 0.5
}

/// Principal square root of a symmetric positive-semidefinite matrix.
///
/// Negative eigenvalues below `-clamp_tol` are a contract violation; values
/// in `[-clamp_tol, 0)` are clamped to zero.
pub fn sqrtm_psd(a: &Array2<f64>, clamp_tol: f64) -> Result<Array2<f64>> {
    let sym = symmetrize(a);
    let (vals, vecs) = sym_eig(&sym)?;
    let mut root = Array1::<f64>::zeros(vals.len());
    for (i, &l) in vals.iter().enumerate() {
        if l < -clamp_tol {
            return Err(Error::Numeric(format!(
                "matrix is not positive semidefinite: eigenvalue {l}"
            )));
        }
        root[i] = l.max(0.0).sqrt();
    }
    let scaled = &vecs * &root; // scales column j by root[j]
    Ok(scaled.dot(&vecs.t()))
}

/// Solve a small square linear system `a x = b` by Gaussian elimination with
/// partial pivoting. Returns `None` when the system is numerically singular.
pub fn solve_small(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return None;
    }
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if m[[row, col]].abs() > m[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if m[[pivot, col]].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap([col, k], [pivot, k]);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[[col, col]];
        for row in (col + 1)..n {
            let f = m[[row, col]] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for k in (col + 1)..n {
            acc -= m[[col, k]] * x[k];
        }
        x[col] = acc / m[[col, col]];
    }
    Some(x)
}
