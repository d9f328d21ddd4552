//! Small dense linear-algebra helpers shared by the PCA and GAM code.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Eigen decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: DVector<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi diagonalization. Sweeps until the off-diagonal Frobenius
/// norm drops below `1e-12` times the Frobenius norm of the input.
pub fn jacobi_eigen(matrix: &DMatrix<f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::InvalidArgument("eigen decomposition needs a square matrix".into()));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in symmetric matrix".into()));
    }
    // symmetrize to remove rounding asymmetry from callers
    let mut a = (matrix + matrix.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let frob = a.norm();
    let target = 1e-12 * frob;

    if frob > 0.0 {
        let mut converged = false;
        for _sweep in 0..100 {
            if off_diagonal_norm(&a) <= target {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        if !converged && off_diagonal_norm(&a) > target {
            return Err(Error::Numerical("Jacobi iteration did not converge".into()));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Flips each column so its largest-magnitude entry is positive. Ties on
/// magnitude resolve to the lowest row index.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, &x) in col.iter().enumerate() {
            // tolerance so rounding noise does not decide between equal loadings
            if x.abs() > best_abs * (1.0 + 1e-9) + 1e-15 {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Orthonormal basis for the null space of the single row `c` (length k),
/// returned as a `k x (k-1)` matrix. Built from a Householder reflection
/// mapping `c` onto the first axis.
pub fn sum_to_zero_basis(c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = c.len();
    if k < 2 {
        return Err(Error::InvalidArgument("constraint needs at least two coefficients".into()));
    }
    let norm = c.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numerical("degenerate identifiability constraint".into()));
    }
    let mut u = c.clone();
    let alpha = if c[0] >= 0.0 { -norm } else { norm };
    u[0] -= alpha;
    let unorm2 = u.norm_squared();
    let mut h = DMatrix::<f64>::identity(k, k);
    if unorm2 > 0.0 {
        h -= (&u * u.transpose()) * (2.0 / unorm2);
    }
    Ok(h.columns(1, k - 1).into_owned())
}

/// Cholesky solve returning `None` when the matrix is not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(m.clone())
}
