//! Generalized additive models with penalized cubic regression splines.
//!
//! Each smooth uses a cardinal natural cubic spline basis on quantile knots
//! (coefficients are the function values at the knots) with the integrated
//! squared second derivative as penalty. Smooths are centered over the
//! fitted rows; the intercept carries the mean. Smoothing parameters are
//! chosen per term by GCV over a log-spaced grid, one coordinate at a time.
//! The Gaussian family is used with identity or log link; the log link is
//! fit by penalized iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ingest::FactorTable;
use crate::linalg;
use crate::stats;
use crate::{Error, Result};

pub const MIN_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GamConfig {
    /// Basis dimension per smooth.
    pub k: usize,
    pub link: Link,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    /// Relative GCV improvement below which coordinate passes stop.
    pub tolerance: f64,
    pub max_passes: usize,
    /// Multiplier on the effective degrees of freedom in the GCV
    /// denominator, `n * rss / (n - gamma * tr(A))^2`. Values above 1
    /// favor smoother fits.
    pub gcv_gamma: f64,
}

impl Default for GamConfig {
    fn default() -> Self {
        Self {
            k: 10,
            link: Link::Identity,
            lambda_min: 1e-4,
            lambda_max: 1e4,
            lambda_points: 30,
            tolerance: 1e-6,
            max_passes: 20,
            gcv_gamma: 1.0,
        }
    }
}

impl GamConfig {
    pub fn lambda_grid(&self) -> Vec<f64> {
        let n = self.lambda_points.max(1);
        if n == 1 {
            return vec![self.lambda_min];
        }
        let (a, b) = (self.lambda_min.ln(), self.lambda_max.ln());
        (0..n)
            .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::InvalidArgument(format!("basis dimension must be >= 3, got {}", self.k)));
        }
        if !(self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min) || self.lambda_points == 0 {
            return Err(Error::InvalidArgument("invalid smoothing-parameter grid".into()));
        }
        if !(self.gcv_gamma > 0.0) {
            return Err(Error::InvalidArgument("gcv_gamma must be positive".into()));
        }
        Ok(())
    }
}

/// How smoothing parameters are set.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum LambdaPolicy {
    #[default]
    Gcv,
    /// One value per term, on the normalized penalty scale.
    Fixed(Vec<f64>),
}

/// Cardinal natural cubic regression spline on fixed knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CrBasis {
    knots: Vec<f64>,
    /// `k x k`; row `j` maps knot values to the second derivative at knot `j`.
    second_deriv: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl CrBasis {
    /// Knots at evenly spaced quantiles of the distinct values of `x`.
    pub fn new(x: &[f64], k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidArgument(format!("basis dimension must be >= 3, got {k}")));
        }
        let mut uniq: Vec<f64> = x.to_vec();
        if uniq.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariate has non-finite values".into()));
        }
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        if uniq.len() < k {
            return Err(Error::InsufficientVariation {
                name: String::new(),
                distinct: uniq.len(),
                k,
            });
        }
        let knots: Vec<f64> = (0..k)
            .map(|j| stats::quantile_sorted(&uniq, j as f64 / (k - 1) as f64))
            .collect();
        Self::from_knots(knots)
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        let k = knots.len();
        if k < 3 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("knots must be strictly increasing, at least 3".into()));
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let chol = nalgebra::Cholesky::new(b)
            .ok_or_else(|| Error::Numerical("spline band matrix not positive definite".into()))?;
        let inner = chol.solve(&d);
        let mut second_deriv = DMatrix::zeros(k, k);
        second_deriv.rows_mut(1, k - 2).copy_from(&inner);
        let penalty = d.transpose() * &inner;
        let penalty = (&penalty + penalty.transpose()) * 0.5;
        Ok(Self {
            knots,
            second_deriv,
            penalty,
        })
    }

    pub fn k(&self) -> usize {
        self.knots.len()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Integrated squared second derivative, as a quadratic form on knot values.
    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Basis row at `x`. Linear extrapolation outside the knot range.
    pub fn eval_row(&self, x: f64) -> DVector<f64> {
        let k = self.k();
        let kn = &self.knots;
        let mut row = DVector::zeros(k);
        if x < kn[0] {
            let h = kn[1] - kn[0];
            // f(x0) + (x - x0) f'(x0)
            let t = x - kn[0];
            row[0] += 1.0 - t / h;
            row[1] += t / h;
            row.axpy(-t * h / 3.0, &self.second_deriv.row(0).transpose(), 1.0);
            row.axpy(-t * h / 6.0, &self.second_deriv.row(1).transpose(), 1.0);
            return row;
        }
        if x > kn[k - 1] {
            let h = kn[k - 1] - kn[k - 2];
            let t = x - kn[k - 1];
            row[k - 1] += 1.0 + t / h;
            row[k - 2] -= t / h;
            row.axpy(t * h / 6.0, &self.second_deriv.row(k - 2).transpose(), 1.0);
            row.axpy(t * h / 3.0, &self.second_deriv.row(k - 1).transpose(), 1.0);
            return row;
        }
        let j = match kn.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(k - 2),
            Err(i) => (i - 1).min(k - 2),
        };
        let h = kn[j + 1] - kn[j];
        let right = kn[j + 1] - x;
        let left = x - kn[j];
        let cm = (right.powi(3) / h - h * right) / 6.0;
        let cp = (left.powi(3) / h - h * left) / 6.0;
        row[j] += right / h;
        row[j + 1] += left / h;
        row.axpy(cm, &self.second_deriv.row(j).transpose(), 1.0);
        row.axpy(cp, &self.second_deriv.row(j + 1).transpose(), 1.0);
        row
    }

    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(xs.len(), self.k());
        for (i, &x) in xs.iter().enumerate() {
            m.set_row(i, &self.eval_row(x).transpose());
        }
        m
    }
}

/// Basis matrix, penalty matrix and knots for covariate `x`.
pub fn build_basis(x: &[f64], k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let basis = CrBasis::new(x, k)?;
    Ok((basis.design(x), basis.penalty.clone(), basis.knots.clone()))
}

/// Fitted smooth term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub name: String,
    pub k: usize,
    pub knots: Vec<f64>,
    /// Function values at the knots (centered basis coefficients).
    pub coefficients: Vec<f64>,
    /// Smoothing parameter on the normalized penalty scale.
    pub lambda: f64,
    pub edf: f64,
    pub p_value: f64,
    /// Wald statistic and its reference degrees of freedom.
    pub wald_stat: f64,
    pub test_df: usize,
}

#[derive(Debug, Clone)]
struct TermDesign {
    basis: CrBasis,
    /// `k x (k-1)` null-space basis of the centering constraint.
    z: DMatrix<f64>,
    /// Penalty on the constrained coefficients, normalized.
    s: DMatrix<f64>,
    /// `s = s_root * s_root^T`, zero directions dropped.
    s_root: DMatrix<f64>,
    offset: usize,
    x_obs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GamFit {
    pub intercept: f64,
    pub terms: Vec<SmoothTerm>,
    pub link: Link,
    pub deviance_explained: f64,
    pub hat_trace: f64,
    /// Residual variance estimate.
    pub scale: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub gcv: f64,
    pub n: usize,
    /// Bayesian posterior covariance of the constrained coefficients.
    pub covariance: DMatrix<f64>,
    /// Table row indices used in the fit.
    pub rows: Vec<usize>,
    pub fitted: Vec<f64>,
    pub response: Vec<f64>,
    beta: DVector<f64>,
    design: DMatrix<f64>,
    weights: DVector<f64>,
    working: DVector<f64>,
    term_designs: Vec<TermDesign>,
}

/// Serializable view of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSummary {
    pub link: Link,
    pub n: usize,
    pub intercept: f64,
    pub deviance_explained: f64,
    pub hat_trace: f64,
    pub scale: f64,
    pub gcv: f64,
    pub terms: Vec<TermSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub name: String,
    pub edf: f64,
    pub p_value: f64,
    pub lambda: f64,
}

impl GamFit {
    pub fn summary(&self) -> GamSummary {
        GamSummary {
            link: self.link,
            n: self.n,
            intercept: self.intercept,
            deviance_explained: self.deviance_explained,
            hat_trace: self.hat_trace,
            scale: self.scale,
            gcv: self.gcv,
            terms: self
                .terms
                .iter()
                .map(|t| TermSummary {
                    name: t.name.clone(),
                    edf: t.edf,
                    p_value: t.p_value,
                    lambda: t.lambda,
                })
                .collect(),
        }
    }

    pub fn term(&self, name: &str) -> Option<&SmoothTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Coefficients in the constrained parameterization (intercept first).
    pub fn coefficients(&self) -> Vec<f64> {
        self.beta.iter().copied().collect()
    }

    fn penalty_matrix(&self) -> DMatrix<f64> {
        let p = self.design.ncols();
        let mut s = DMatrix::zeros(p, p);
        for (td, t) in self.term_designs.iter().zip(&self.terms) {
            let m = td.s.nrows();
            let mut block = s.view_mut((td.offset, td.offset), (m, m));
            block += &td.s * t.lambda;
        }
        s
    }

    /// Weighted residual sum of squares on the working response plus the
    /// smoothing penalty, at `beta`.
    pub fn penalized_objective(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        let r = &self.working - &self.design * &b;
        let rss: f64 = r.iter().zip(self.weights.iter()).map(|(ri, wi)| wi * ri * ri).sum();
        rss + (b.transpose() * self.penalty_matrix() * &b)[(0, 0)]
    }

    /// Analytic gradient of `penalized_objective`.
    pub fn penalized_gradient(&self, beta: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(beta);
        let r = &self.working - &self.design * &b;
        let wr = r.component_mul(&self.weights);
        let g = -2.0 * self.design.transpose() * wr + 2.0 * self.penalty_matrix() * &b;
        g.iter().copied().collect()
    }

    /// Linear predictor for new covariate values, one slice per term.
    pub fn predict_link(&self, columns: &[&[f64]]) -> Result<Vec<f64>> {
        if columns.len() != self.terms.len() {
            return Err(Error::InvalidArgument("one column per term required".into()));
        }
        let n = columns.first().map_or(0, |c| c.len());
        let mut eta = vec![self.intercept; n];
        for (td, col) in self.term_designs.iter().zip(columns) {
            let coef = self.beta.rows(td.offset, td.z.ncols());
            let gamma = &td.z * coef;
            for (e, &x) in eta.iter_mut().zip(col.iter()) {
                *e += td.basis.eval_row(x).dot(&gamma);
            }
        }
        Ok(eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothCurve {
    pub term: String,
    pub x: Vec<f64>,
    pub fit: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Centered term effect on a regular grid over the observed range, with
/// bands at plus/minus two posterior standard errors.
pub fn smooth_curve(fit: &GamFit, term: &str, grid_size: usize) -> Result<SmoothCurve> {
    let idx = fit
        .terms
        .iter()
        .position(|t| t.name == term)
        .ok_or_else(|| Error::UnknownTerm(term.to_string()))?;
    let td = &fit.term_designs[idx];
    let lo = td.x_obs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = td.x_obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let g = grid_size.max(2);
    let xs: Vec<f64> = (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64).collect();
    term_values(fit, idx, &xs)
}

/// Term effect and bands at arbitrary covariate values.
pub fn term_curve_at(fit: &GamFit, term: &str, xs: &[f64]) -> Result<SmoothCurve> {
    let idx = fit
        .terms
        .iter()
        .position(|t| t.name == term)
        .ok_or_else(|| Error::UnknownTerm(term.to_string()))?;
    term_values(fit, idx, xs)
}

fn term_values(fit: &GamFit, idx: usize, xs: &[f64]) -> Result<SmoothCurve> {
    let td = &fit.term_designs[idx];
    let m = td.z.ncols();
    let coef = fit.beta.rows(td.offset, m).into_owned();
    let v = fit.covariance.view((td.offset, td.offset), (m, m)).into_owned();
    let mut fitv = Vec::with_capacity(xs.len());
    let mut lower = Vec::with_capacity(xs.len());
    let mut upper = Vec::with_capacity(xs.len());
    for &x in xs {
        let row = td.z.transpose() * td.basis.eval_row(x);
        let f = row.dot(&coef);
        let var = (row.transpose() * &v * &row)[(0, 0)].max(0.0);
        let se = var.sqrt();
        fitv.push(f);
        lower.push(f - 2.0 * se);
        upper.push(f + 2.0 * se);
    }
    Ok(SmoothCurve {
        term: fit.terms[idx].name.clone(),
        x: xs.to_vec(),
        fit: fitv,
        lower,
        upper,
    })
}

pub fn deviance_explained(fit: &GamFit) -> f64 {
    fit.deviance_explained
}

/// Fits a GAM on the table rows that have the response and every term.
pub fn fit_gam(table: &FactorTable, terms: &[&str], config: &GamConfig, policy: &LambdaPolicy) -> Result<GamFit> {
    let rows = table.complete_rows(terms)?;
    let y: Vec<f64> = rows.iter().map(|&i| table.response()[i].expect("complete row")).collect();
    let columns: Vec<(String, Vec<f64>)> = terms
        .iter()
        .map(|&t| {
            let col = table.factor(t).expect("checked by complete_rows");
            (t.to_string(), rows.iter().map(|&i| col.values[i].expect("complete row")).collect())
        })
        .collect();
    let refs: Vec<(&str, &[f64])> = columns.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let mut fit = fit_gam_columns(&refs, &y, config, policy)?;
    fit.rows = rows;
    Ok(fit)
}

/// Fits a GAM on plain vectors. `columns` are `(name, values)` pairs of
/// equal length to `y`.
pub fn fit_gam_columns(
    columns: &[(&str, &[f64])],
    y: &[f64],
    config: &GamConfig,
    policy: &LambdaPolicy,
) -> Result<GamFit> {
    config.validate()?;
    let n = y.len();
    if n < MIN_ROWS {
        return Err(Error::Degenerate(format!("GAM needs at least {MIN_ROWS} usable rows, found {n}")));
    }
    if columns.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::InvalidArgument("covariate length differs from response".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("response has non-finite values".into()));
    }
    if let LambdaPolicy::Fixed(l) = policy {
        if l.len() != columns.len() || l.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("fixed lambdas: one non-negative value per term".into()));
        }
    }
    if config.link == Link::Log && y.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument("log link needs a non-negative response".into()));
    }

    let k = config.k;
    let mut term_designs = Vec::with_capacity(columns.len());
    let mut blocks = Vec::with_capacity(columns.len());
    let mut offset = 1;
    for (name, x) in columns {
        let basis = CrBasis::new(x, k).map_err(|e| match e {
            Error::InsufficientVariation { distinct, k, .. } => Error::InsufficientVariation {
                name: name.to_string(),
                distinct,
                k,
            },
            other => other,
        })?;
        let raw = basis.design(x);
        let c = DVector::from_iterator(k, raw.column_iter().map(|col| col.sum()));
        let z = linalg::sum_to_zero_basis(&c)?;
        let xz = &raw * &z;
        let s = z.transpose() * &basis.penalty * &z;
        let s = (&s + s.transpose()) * 0.5;
        let xtx = xz.transpose() * &xz;
        let s_norm = s.norm();
        if !(s_norm > 0.0) {
            return Err(Error::Numerical(format!("zero penalty for term '{name}'")));
        }
        let s = s * (xtx.norm() / s_norm);
        let s_root = penalty_root(&s)?;
        term_designs.push(TermDesign {
            basis,
            z,
            s,
            s_root,
            offset,
            x_obs: x.to_vec(),
        });
        offset += k - 1;
        blocks.push(xz);
    }
    let p = offset;
    let mut design = DMatrix::zeros(n, p);
    design.column_mut(0).fill(1.0);
    for (td, b) in term_designs.iter().zip(&blocks) {
        design.columns_mut(td.offset, b.ncols()).copy_from(b);
    }
    check_rank(&design, &term_designs, columns)?;

    let yv = DVector::from_column_slice(y);
    let mean_y = stats::mean(y);
    let null_deviance: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let grid = config.lambda_grid();

    match config.link {
        Link::Identity => {
            let w = DVector::from_element(n, 1.0);
            let pls = Pls::new(&design, &w, &yv, &term_designs, config.gcv_gamma);
            let lambdas = choose_lambdas(&pls, &grid, policy, config, null_deviance / n as f64)?;
            let sol = pls.solve(&lambdas)?;
            finish(
                design, w, yv.clone(), yv, sol, lambdas, term_designs, columns, config.link, null_deviance,
            )
        }
        Link::Log => fit_log_link(design, yv, term_designs, columns, config, policy, &grid, null_deviance),
    }
}

fn penalty_root(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = linalg::jacobi_eigen(s)?;
    let max = eig.values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.values.len()).filter(|&i| eig.values[i] > 1e-12 * max).collect();
    Ok(DMatrix::from_fn(s.nrows(), keep.len(), |r, c| {
        eig.vectors[(r, keep[c])] * eig.values[keep[c]].sqrt()
    }))
}

fn check_rank(design: &DMatrix<f64>, tds: &[TermDesign], columns: &[(&str, &[f64])]) -> Result<()> {
    let deficient = |cols: usize| -> bool {
        let x = design.columns(0, cols);
        let mut g = x.transpose() * x;
        let d: Vec<f64> = (0..cols).map(|i| g[(i, i)].sqrt().max(f64::MIN_POSITIVE)).collect();
        for i in 0..cols {
            for j in 0..cols {
                g[(i, j)] /= d[i] * d[j];
            }
        }
        let eig = g.symmetric_eigenvalues();
        let max = eig.iter().copied().fold(0.0, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        !(min > 1e-10 * max)
    };
    if !deficient(design.ncols()) {
        return Ok(());
    }
    for (td, (name, _)) in tds.iter().zip(columns) {
        if deficient(td.offset + td.z.ncols()) {
            return Err(Error::RankDeficient(name.to_string()));
        }
    }
    Err(Error::RankDeficient(columns.last().map_or("", |c| c.0).to_string()))
}

/// Penalized weighted least squares with cached cross products.
struct Pls<'a> {
    xtwx: DMatrix<f64>,
    xtwz: DVector<f64>,
    ztwz: f64,
    tds: &'a [TermDesign],
    n: usize,
    gamma: f64,
}

struct PlsSolution {
    beta: DVector<f64>,
    h_inv: DMatrix<f64>,
    trace: f64,
    edf: Vec<f64>,
    gcv: f64,
}

impl<'a> Pls<'a> {
    fn new(x: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>, tds: &'a [TermDesign], gamma: f64) -> Self {
        let n = x.nrows();
        let mut xw = x.clone();
        for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let xtwx = x.transpose() * &xw;
        let xtwx = (&xtwx + xtwx.transpose()) * 0.5;
        let xtwz = xw.transpose() * z;
        let ztwz = z.iter().zip(w.iter()).map(|(zi, wi)| wi * zi * zi).sum();
        Self {
            xtwx,
            xtwz,
            ztwz,
            tds,
            n,
            gamma,
        }
    }

    fn hessian(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut h = self.xtwx.clone();
        for (td, &l) in self.tds.iter().zip(lambdas) {
            let m = td.s.nrows();
            let mut block = h.view_mut((td.offset, td.offset), (m, m));
            block += &td.s * l;
        }
        h
    }

    fn gcv(&self, lambdas: &[f64]) -> Result<f64> {
        let h = self.hessian(lambdas);
        let chol = linalg::cholesky(&h).ok_or_else(|| Error::Numerical("penalized system not positive definite".into()))?;
        let beta = chol.solve(&self.xtwz);
        let h_inv = chol.inverse();
        let trace = h_inv.component_mul(&self.xtwx).sum();
        let rss = (self.ztwz - 2.0 * beta.dot(&self.xtwz) + (beta.transpose() * &self.xtwx * &beta)[(0, 0)]).max(0.0);
        Ok(gcv_score(self.n, rss, self.gamma * trace))
    }

    /// GCV along coordinate `j` for every value of the ascending `grid`,
    /// other smoothing parameters held at `lambdas`. Factorizes once at
    /// `grid[0]`; term `j`'s penalty is low rank, so each grid point then
    /// costs O(r^2). `None` when the base system cannot be factorized.
    fn gcv_profile(&self, lambdas: &[f64], j: usize, grid: &[f64]) -> Option<Vec<f64>> {
        let mut base = lambdas.to_vec();
        base[j] = grid[0];
        let chol = linalg::cholesky(&self.hessian(&base))?;
        let l = chol.l();
        let p = l.nrows();
        let t0 = chol.inverse().component_mul(&self.xtwx).sum();
        let beta0 = chol.solve(&self.xtwz);
        let td = &self.tds[j];
        let r = td.s_root.ncols();
        let mut e = DMatrix::zeros(p, r);
        e.rows_mut(td.offset, td.s_root.nrows()).copy_from(&td.s_root);
        let w = l.solve_lower_triangular(&e)?;
        let svd = w.svd(true, false);
        let u = svd.u?;
        let d: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
        let v = l.transpose().solve_upper_triangular(&u)?;
        let xtx_v = &self.xtwx * &v;
        let g = v.transpose() * &xtx_v;
        let h = xtx_v.transpose() * &beta0;
        let uvec = v.transpose() * &self.xtwz;
        let bb = beta0.dot(&self.xtwz);
        let bpb = (beta0.transpose() * &self.xtwx * &beta0)[(0, 0)];
        let k = d.len();
        Some(
            grid.iter()
                .map(|&lam| {
                    let mu = lam - grid[0];
                    let gf: Vec<f64> = d.iter().map(|&di| mu * di / (1.0 + mu * di)).collect();
                    let gu = DVector::from_iterator(k, (0..k).map(|i| gf[i] * uvec[i]));
                    let trace = t0 - (0..k).map(|i| gf[i] * g[(i, i)]).sum::<f64>();
                    let cb = bb - (0..k).map(|i| gf[i] * uvec[i] * uvec[i]).sum::<f64>();
                    let cpc = bpb - 2.0 * gu.dot(&h) + (gu.transpose() * &g * &gu)[(0, 0)];
                    let rss = (self.ztwz - 2.0 * cb + cpc).max(0.0);
                    gcv_score(self.n, rss, self.gamma * trace)
                })
                .collect(),
        )
    }

    fn solve(&self, lambdas: &[f64]) -> Result<PlsSolution> {
        let h = self.hessian(lambdas);
        let chol = linalg::cholesky(&h).ok_or_else(|| Error::Numerical("penalized system not positive definite".into()))?;
        let beta = chol.solve(&self.xtwz);
        let h_inv = chol.inverse();
        let f = &h_inv * &self.xtwx;
        let trace = f.trace();
        let edf = self
            .tds
            .iter()
            .map(|td| (td.offset..td.offset + td.s.nrows()).map(|i| f[(i, i)]).sum())
            .collect();
        let rss = (self.ztwz - 2.0 * beta.dot(&self.xtwz) + (beta.transpose() * &self.xtwx * &beta)[(0, 0)]).max(0.0);
        Ok(PlsSolution {
            gcv: gcv_score(self.n, rss, self.gamma * trace),
            beta,
            h_inv,
            trace,
            edf,
        })
    }
}

fn gcv_score(n: usize, rss: f64, trace: f64) -> f64 {
    let denom = n as f64 - trace;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    n as f64 * rss / (denom * denom)
}

/// Coordinate-wise grid search. GCV values closer than `1e-12 * var_scale`
/// count as ties, which go to the larger smoothing parameter.
fn choose_lambdas(
    pls: &Pls<'_>,
    grid: &[f64],
    policy: &LambdaPolicy,
    config: &GamConfig,
    var_scale: f64,
) -> Result<Vec<f64>> {
    let m = pls.tds.len();
    if let LambdaPolicy::Fixed(l) = policy {
        return Ok(l.clone());
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let tie = 1e-12 * var_scale.max(f64::MIN_POSITIVE);
    let mut idx = vec![grid.len() / 2; m];
    let to_lambdas = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| grid[i]).collect() };
    let mut current = pls.gcv(&to_lambdas(&idx))?;
    for pass in 0..config.max_passes.max(1) {
        let start = current;
        let mut changed = false;
        for j in 0..m {
            let lambdas = to_lambdas(&idx);
            let profile = match pls.gcv_profile(&lambdas, j, grid) {
                Some(v) => v,
                None => grid
                    .iter()
                    .map(|&g| {
                        let mut l = lambdas.clone();
                        l[j] = g;
                        pls.gcv(&l)
                    })
                    .collect::<Result<Vec<f64>>>()?,
            };
            let mut best_i = idx[j];
            let mut best = f64::INFINITY;
            for gi in (0..grid.len()).rev() {
                if profile[gi] < best - tie {
                    best = profile[gi];
                    best_i = gi;
                }
            }
            if best_i != idx[j] {
                idx[j] = best_i;
                changed = true;
            }
            current = best;
        }
        if !changed || m == 1 && pass == 0 {
            break;
        }
        if (start - current).abs() <= config.tolerance * start.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(idx.iter().map(|&i| grid[i]).collect())
}

#[allow(clippy::too_many_arguments)]
fn fit_log_link(
    design: DMatrix<f64>,
    y: DVector<f64>,
    tds: Vec<TermDesign>,
    columns: &[(&str, &[f64])],
    config: &GamConfig,
    policy: &LambdaPolicy,
    grid: &[f64],
    null_deviance: f64,
) -> Result<GamFit> {
    let n = y.len();
    let mean_y = y.mean();
    if !(mean_y > 0.0) {
        return Err(Error::Degenerate("log link needs a positive mean response".into()));
    }
    let mut mu: DVector<f64> = y.map(|v| v + 0.1 * mean_y);
    let mut eta = mu.map(f64::ln);
    let mut dev_old = f64::INFINITY;
    let mut last = None;
    for _ in 0..100 {
        let w = mu.map(|m| m * m);
        let z = DVector::from_iterator(n, (0..n).map(|i| eta[i] + (y[i] - mu[i]) / mu[i]));
        let pls = Pls::new(&design, &w, &z, &tds, config.gcv_gamma);
        let var_scale = z.iter().zip(w.iter()).map(|(zi, wi)| wi * zi * zi).sum::<f64>() / n as f64;
        let lambdas = choose_lambdas(&pls, grid, policy, config, var_scale)?;
        let sol = pls.solve(&lambdas)?;
        let mut eta_new = &design * &sol.beta;
        let mut dev = deviance_of(&y, &eta_new);
        let mut halvings = 0;
        while (!dev.is_finite() || dev > dev_old) && halvings < 20 {
            eta_new = (&eta_new + &eta) * 0.5;
            dev = deviance_of(&y, &eta_new);
            halvings += 1;
        }
        eta = eta_new;
        mu = eta.map(f64::exp);
        let converged = (dev_old - dev).abs() <= 1e-8 * dev.max(1e-300);
        dev_old = dev;
        last = Some((w, z, sol, lambdas));
        if converged {
            break;
        }
    }
    let (w, z, sol, lambdas) = last.expect("at least one PIRLS iteration");
    finish(design, w, z, y, sol, lambdas, tds, columns, Link::Log, null_deviance)
}

fn deviance_of(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter().zip(eta.iter()).map(|(yi, e)| (yi - e.exp()).powi(2)).sum()
}

#[allow(clippy::too_many_arguments)]
fn finish(
    design: DMatrix<f64>,
    weights: DVector<f64>,
    working: DVector<f64>,
    y: DVector<f64>,
    sol: PlsSolution,
    lambdas: Vec<f64>,
    tds: Vec<TermDesign>,
    columns: &[(&str, &[f64])],
    link: Link,
    null_deviance: f64,
) -> Result<GamFit> {
    let n = y.len();
    let eta = &design * &sol.beta;
    let fitted: DVector<f64> = match link {
        Link::Identity => eta.clone(),
        Link::Log => eta.map(f64::exp),
    };
    let deviance: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let resid_df = n as f64 - sol.trace;
    let scale = if resid_df > 0.0 { deviance / resid_df } else { f64::NAN };
    let covariance = &sol.h_inv * scale;
    let deviance_explained = if null_deviance > 0.0 {
        1.0 - deviance / null_deviance
    } else {
        0.0
    };

    let mut terms = Vec::with_capacity(tds.len());
    for (j, td) in tds.iter().enumerate() {
        let m = td.z.ncols();
        let coef = sol.beta.rows(td.offset, m).into_owned();
        let v = covariance.view((td.offset, td.offset), (m, m)).into_owned();
        let edf = sol.edf[j];
        let (stat, df, p) = wald_test(&coef, &v, edf, resid_df)?;
        terms.push(SmoothTerm {
            name: columns[j].0.to_string(),
            k: td.basis.k(),
            knots: td.basis.knots.clone(),
            coefficients: (&td.z * &coef).iter().copied().collect(),
            lambda: lambdas[j],
            edf,
            p_value: p,
            wald_stat: stat,
            test_df: df,
        });
    }
    Ok(GamFit {
        intercept: sol.beta[0],
        terms,
        link,
        deviance_explained,
        hat_trace: sol.trace,
        scale,
        deviance,
        null_deviance,
        gcv: sol.gcv,
        n,
        covariance,
        rows: (0..n).collect(),
        fitted: fitted.iter().copied().collect(),
        response: y.iter().copied().collect(),
        beta: sol.beta,
        design,
        weights,
        working,
        term_designs: tds,
    })
}

/// Wald-type test on a penalized term: the statistic uses a rank-`r`
/// pseudo-inverse of the term covariance with `r = round(edf)`, referred
/// to `F(r, resid_df)`. Approximate, like the usual GAM software tests.
fn wald_test(coef: &DVector<f64>, v: &DMatrix<f64>, edf: f64, resid_df: f64) -> Result<(f64, usize, f64)> {
    let m = coef.len();
    let r = (edf.round() as usize).clamp(1, m);
    if !v.iter().all(|x| x.is_finite()) || !(resid_df > 0.0) {
        return Ok((f64::NAN, r, f64::NAN));
    }
    let eig = linalg::jacobi_eigen(v)?;
    let mut stat = 0.0;
    let mut used = 0;
    for i in 0..r {
        let lam = eig.values[i];
        if lam <= 0.0 {
            break;
        }
        let proj = eig.vectors.column(i).dot(coef);
        stat += proj * proj / lam;
        used += 1;
    }
    let used = used.max(1);
    Ok((stat, used, stats::f_upper_tail(stat / used as f64, used as f64, resid_df)))
}
