//! Covariance PCA on pre-standardized columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub means: Vec<f64>,
    /// Loading vectors, one per component, each of length `cols`.
    pub components: Vec<Vec<f64>>,
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    fn loadings(&self, n: usize) -> DMatrix<f64> {
        let cols = self.means.len();
        DMatrix::from_fn(cols, n, |r, c| self.components[c][r])
    }

    /// Maps scores back to the original space.
    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = scores.ncols();
        if n > self.n_components() {
            return Err(Error::InvalidArgument(format!(
                "{n} score columns but model has {} components",
                self.n_components()
            )));
        }
        let mut out = scores * self.loadings(n).transpose();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.means) {
                *v += m;
            }
        }
        Ok(out)
    }
}

/// Eigendecomposition of the sample covariance of `matrix` (rows are
/// observations). Keeps `min(rows - 1, cols)` components; each loading
/// vector has its largest-magnitude entry positive.
pub fn fit_pca(matrix: &DMatrix<f64>) -> Result<PcaModel> {
    let (rows, cols) = matrix.shape();
    if rows < 2 || cols == 0 {
        return Err(Error::Degenerate(format!("PCA needs at least 2 rows, got {rows}x{cols}")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("PCA input contains missing or non-finite cells".into()));
    }
    let means: Vec<f64> = (0..cols).map(|c| matrix.column(c).mean()).collect();
    let mut centered = matrix.clone();
    for (c, m) in means.iter().enumerate() {
        centered.column_mut(c).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (rows - 1) as f64;
    if cov.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("rank-0 matrix: every column has zero variance".into()));
    }
    let eig = linalg::jacobi_eigen(&cov)?;
    let keep = (rows - 1).min(cols);
    let mut vectors = eig.vectors.columns(0, keep).into_owned();
    linalg::fix_signs(&mut vectors);
    Ok(PcaModel {
        means,
        components: vectors.column_iter().map(|c| c.iter().copied().collect()).collect(),
        eigenvalues: eig.values.iter().take(keep).map(|v| v.max(0.0)).collect(),
    })
}

/// Centered data times the first `n_components` loading vectors.
pub fn project(model: &PcaModel, matrix: &DMatrix<f64>, n_components: usize) -> Result<DMatrix<f64>> {
    if n_components == 0 || n_components > model.n_components() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_components} components, model has {}",
            model.n_components()
        )));
    }
    if matrix.ncols() != model.means.len() {
        return Err(Error::InvalidArgument("column count differs from fitted model".into()));
    }
    let mut centered = matrix.clone();
    for (c, m) in model.means.iter().enumerate() {
        centered.column_mut(c).add_scalar_mut(-m);
    }
    Ok(centered * model.loadings(n_components))
}

/// Share of total variance carried by the first `n` components.
pub fn variance_explained(model: &PcaModel, n: usize) -> f64 {
    let total: f64 = model.eigenvalues.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let n = n.min(model.eigenvalues.len());
    if n == model.eigenvalues.len() {
        return 1.0;
    }
    (model.eigenvalues[..n].iter().sum::<f64>() / total).clamp(0.0, 1.0)
}

/// Row-major helper for callers holding `Vec<Vec<f64>>`.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), (0..m.ncols()).map(|c| m.column(c).mean()))
}
