//! Model-based clustering: Gaussian mixtures fit by EM and compared by BIC.
//!
//! BIC here is `2 * loglik - n_params * ln(n)`; larger is better.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ingest::FactorTable;
use crate::stats;
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 500;
pub const RELATIVE_TOLERANCE: f64 = 1e-8;
pub const N_RESTARTS: usize = 10;
/// Strength of the covariance penalty `-ridge/2 * sum_j tr(inv(cov_j))`,
/// relative to the mean column variance.
pub const RIDGE_FACTOR: f64 = 1e-6;
/// Allowed decrease of the penalized log-likelihood between EM iterations,
/// relative to `max(1, |loglik|)`.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;
const BIC_TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFamily {
    Spherical,
    Diagonal,
    Full,
}

impl CovarianceFamily {
    pub const ALL: [CovarianceFamily; 3] = [Self::Spherical, Self::Diagonal, Self::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Spherical => "spherical",
            Self::Diagonal => "diagonal",
            Self::Full => "full",
        }
    }

    fn index(&self) -> u64 {
        match self {
            Self::Spherical => 0,
            Self::Diagonal => 1,
            Self::Full => 2,
        }
    }

    /// Fewest member rows for which the component covariance estimate is
    /// non-singular.
    pub fn min_component_rows(&self, d: usize) -> usize {
        match self {
            Self::Spherical | Self::Diagonal => 2,
            Self::Full => d + 1,
        }
    }

    /// Free covariance parameters for one component in `d` dimensions.
    pub fn cov_params(&self, d: usize) -> usize {
        match self {
            Self::Spherical => 1,
            Self::Diagonal => d,
            Self::Full => d * (d + 1) / 2,
        }
    }
}

impl std::fmt::Display for CovarianceFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CovarianceFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spherical" => Ok(Self::Spherical),
            "diagonal" => Ok(Self::Diagonal),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidArgument(format!("unknown covariance family '{other}'"))),
        }
    }
}

/// Number of free parameters of a K-component mixture in `d` dimensions.
pub fn n_params(k: usize, d: usize, family: CovarianceFamily) -> usize {
    k * d + (k - 1) + k * family.cov_params(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub k: usize,
    pub family: CovarianceFamily,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Full `d x d` matrices (row-major nested) regardless of family.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub responsibilities: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every E-step of the winning restart.
    pub loglik_trace: Vec<f64>,
    /// EM steps, over all restarts, where the penalized log-likelihood fell
    /// by more than the rounding tolerance.
    pub monotonicity_violations: usize,
}

impl GmmFit {
    /// Row-wise argmax of the responsibilities; ties go to the lower index.
    pub fn labels(&self) -> Vec<usize> {
        self.responsibilities
            .iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

struct Gaussian {
    log_norm: f64,
    chol_l: DMatrix<f64>,
}

impl Gaussian {
    fn new(cov: &DMatrix<f64>) -> Option<Self> {
        let d = cov.nrows();
        let chol = nalgebra::Cholesky::new(cov.clone())?;
        let l = chol.unpack();
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        Some(Self {
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            chol_l: l,
        })
    }

    fn log_pdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let diff = x - mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn project_family(s: &DMatrix<f64>, family: CovarianceFamily, ridge: f64) -> DMatrix<f64> {
    let d = s.nrows();
    match family {
        CovarianceFamily::Full => {
            let mut c = (s + s.transpose()) * 0.5;
            for i in 0..d {
                c[(i, i)] += ridge;
            }
            c
        }
        CovarianceFamily::Diagonal => {
            DMatrix::from_diagonal(&DVector::from_iterator(d, (0..d).map(|i| s[(i, i)] + ridge)))
        }
        CovarianceFamily::Spherical => {
            let v = s.trace() / d as f64 + ridge;
            DMatrix::from_diagonal_element(d, d, v)
        }
    }
}

/// E-step. Returns the log-likelihood and fills `resp`.
fn e_step(rows: &[DVector<f64>], comps: &[Component], resp: &mut [Vec<f64>]) -> Option<f64> {
    let gaussians: Vec<Gaussian> = comps.iter().map(|c| Gaussian::new(&c.cov)).collect::<Option<_>>()?;
    let mut ll = 0.0;
    let mut buf = vec![0.0; comps.len()];
    for (x, r) in rows.iter().zip(resp.iter_mut()) {
        for (j, (c, g)) in comps.iter().zip(&gaussians).enumerate() {
            buf[j] = c.weight.ln() + g.log_pdf(x, &c.mean);
        }
        let lse = log_sum_exp(&buf);
        if !lse.is_finite() {
            return None;
        }
        ll += lse;
        for (rj, bj) in r.iter_mut().zip(&buf) {
            *rj = (bj - lse).exp();
        }
        let s: f64 = r.iter().sum();
        for rj in r.iter_mut() {
            *rj /= s;
        }
    }
    Some(ll)
}

fn m_step(
    rows: &[DVector<f64>],
    resp: &[Vec<f64>],
    family: CovarianceFamily,
    ridge: f64,
) -> Option<Vec<Component>> {
    let n = rows.len();
    let d = rows[0].len();
    let k = resp[0].len();
    let mut comps = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        if nk < 1e-10 {
            return None;
        }
        let mut mean = DVector::zeros(d);
        for (x, r) in rows.iter().zip(resp) {
            mean.axpy(r[j], x, 1.0);
        }
        mean /= nk;
        let mut s = DMatrix::zeros(d, d);
        for (x, r) in rows.iter().zip(resp) {
            let diff = x - &mean;
            s.ger(r[j], &diff, &diff, 1.0);
        }
        s /= nk;
        comps.push(Component {
            weight: nk / n as f64,
            mean,
            cov: project_family(&s, family, ridge / nk),
        });
    }
    Some(comps)
}

/// `ridge/2 * sum_j tr(inv(cov_j))`. The M-step above maximizes the
/// expected log-likelihood minus this term, so EM never decreases
/// `loglik - penalty`.
fn penalty(comps: &[Component], ridge: f64) -> Option<f64> {
    let mut total = 0.0;
    for c in comps {
        total += nalgebra::Cholesky::new(c.cov.clone())?.inverse().trace();
    }
    Some(0.5 * ridge * total)
}

/// Farthest-point seeding from a random first row.
fn farthest_point_centers(rows: &[DVector<f64>], k: usize, rng: &mut stats::Rng) -> Vec<usize> {
    let n = rows.len();
    let mut centers = vec![rng.random_range(0..n)];
    let mut min_dist: Vec<f64> = rows.iter().map(|x| (x - &rows[centers[0]]).norm_squared()).collect();
    while centers.len() < k {
        let mut best = 0;
        for i in 1..n {
            if min_dist[i] > min_dist[best] {
                best = i;
            }
        }
        centers.push(best);
        for (i, x) in rows.iter().enumerate() {
            min_dist[i] = min_dist[i].min((x - &rows[best]).norm_squared());
        }
    }
    centers
}

struct RunResult {
    comps: Vec<Component>,
    resp: Vec<Vec<f64>>,
    ll: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    violations: usize,
}

fn run_em(
    rows: &[DVector<f64>],
    k: usize,
    family: CovarianceFamily,
    ridge: f64,
    global_cov: &DMatrix<f64>,
    rng: &mut stats::Rng,
) -> Option<RunResult> {
    let centers = farthest_point_centers(rows, k, rng);
    let init_cov = project_family(global_cov, family, ridge);
    let mut comps: Vec<Component> = centers
        .iter()
        .map(|&c| Component {
            weight: 1.0 / k as f64,
            mean: rows[c].clone(),
            cov: init_cov.clone(),
        })
        .collect();
    let mut resp = vec![vec![0.0; k]; rows.len()];
    let mut ll = e_step(rows, &comps, &mut resp)?;
    let mut obj = ll - penalty(&comps, ridge)?;
    let mut trace = vec![ll];
    let mut violations = 0;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let next = m_step(rows, &resp, family, ridge)?;
        let mut next_resp = resp.clone();
        let next_ll = e_step(rows, &next, &mut next_resp)?;
        let next_obj = next_ll - penalty(&next, ridge)?;
        if next_obj < obj - MONOTONE_TOLERANCE * obj.abs().max(1.0) {
            violations += 1;
        }
        debug_assert!(
            next_obj >= obj - 1e-6 * obj.abs().max(1.0),
            "penalized EM objective fell from {obj} to {next_obj}"
        );
        obj = next_obj;
        trace.push(next_ll);
        let change = (next_ll - ll).abs();
        comps = next;
        resp = next_resp;
        let prev = ll;
        ll = next_ll;
        if change < RELATIVE_TOLERANCE * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Some(RunResult {
        comps,
        resp,
        ll,
        trace,
        iterations,
        converged,
        violations,
    })
}

fn to_rows(data: &DMatrix<f64>) -> Vec<DVector<f64>> {
    data.row_iter().map(|r| r.transpose()).collect()
}

/// Fits a K-component mixture by EM, best of `N_RESTARTS` seeded starts.
pub fn fit_gmm(data: &DMatrix<f64>, k: usize, family: CovarianceFamily, seed: u64) -> Result<GmmFit> {
    let (n, d) = data.shape();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("data has no columns".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds row count {n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("data contains non-finite values".into()));
    }
    let rows = to_rows(data);
    let mean = rows.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let mut global = DMatrix::zeros(d, d);
    for x in &rows {
        let diff = x - &mean;
        global.ger(1.0, &diff, &diff, 1.0);
    }
    global /= n as f64;
    let mean_var = global.trace() / d as f64;
    if !(mean_var > 0.0) {
        return Err(Error::Degenerate("all rows are identical".into()));
    }
    let ridge = RIDGE_FACTOR * mean_var;

    let mut best: Option<RunResult> = None;
    let mut violations = 0;
    for restart in 0..N_RESTARTS {
        let mut rng = stats::seeded_rng(stats::derive_seed(seed, &[restart as u64]));
        if let Some(run) = run_em(&rows, k, family, ridge, &global, &mut rng) {
            violations += run.violations;
            // a component sitting on fewer rows than its covariance needs is
            // a likelihood singularity, not a cluster
            let min_rows = family.min_component_rows(d) as f64 - 1e-6;
            if run.comps.iter().any(|c| c.weight * (n as f64) < min_rows) {
                continue;
            }
            if best.as_ref().is_none_or(|b| run.ll > b.ll) {
                best = Some(run);
            }
        }
        if k == 1 {
            // every start is identical
            break;
        }
    }
    let best = best.ok_or_else(|| {
        Error::Degenerate(format!("every EM start collapsed or left a component with too few rows for K = {k}, {family}"))
    })?;
    Ok(GmmFit {
        k,
        family,
        weights: best.comps.iter().map(|c| c.weight).collect(),
        means: best.comps.iter().map(|c| c.mean.iter().copied().collect()).collect(),
        covariances: best
            .comps
            .iter()
            .map(|c| c.cov.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
        log_likelihood: best.ll,
        n_params: n_params(k, d, family),
        responsibilities: best.resp,
        iterations: best.iterations,
        converged: best.converged,
        loglik_trace: best.trace,
        monotonicity_violations: violations,
    })
}

/// Observed-data log-likelihood of arbitrary mixture parameters.
pub fn mixture_log_likelihood(data: &DMatrix<f64>, fit: &GmmFit) -> Result<f64> {
    let comps: Vec<Component> = (0..fit.k)
        .map(|j| Component {
            weight: fit.weights[j],
            mean: DVector::from_vec(fit.means[j].clone()),
            cov: DMatrix::from_fn(fit.means[j].len(), fit.means[j].len(), |r, c| fit.covariances[j][r][c]),
        })
        .collect();
    let rows = to_rows(data);
    let mut resp = vec![vec![0.0; fit.k]; rows.len()];
    e_step(&rows, &comps, &mut resp).ok_or_else(|| Error::Numerical("covariance not positive definite".into()))
}

pub fn bic(fit: &GmmFit, n: usize) -> f64 {
    2.0 * fit.log_likelihood - fit.n_params as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub k: usize,
    pub family: CovarianceFamily,
    pub bic: Option<f64>,
    pub loglik: Option<f64>,
    pub n_params: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub fit: GmmFit,
    pub bic: f64,
    pub bic_table: Vec<BicEntry>,
}

/// Picks the winning entry of a BIC table: highest BIC, ties within 1e-9
/// go to fewer parameters, then smaller K, then family order.
pub fn best_bic_entry(table: &[BicEntry]) -> Option<usize> {
    let top = table.iter().filter_map(|e| e.bic).fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return None;
    }
    table
        .iter()
        .enumerate()
        .filter(|(_, e)| e.bic.is_some_and(|b| b >= top - BIC_TIE))
        .min_by(|(_, a), (_, b)| {
            a.n_params
                .cmp(&b.n_params)
                .then(a.k.cmp(&b.k))
                .then(a.family.cmp(&b.family))
        })
        .map(|(i, _)| i)
}

/// Exhaustive sweep over `ks` x `families`. Candidates that fail are
/// recorded in the table and skipped.
pub fn select_model(
    data: &DMatrix<f64>,
    ks: &[usize],
    families: &[CovarianceFamily],
    seed: u64,
) -> Result<ClusterAssignment> {
    let candidates: Vec<(usize, CovarianceFamily)> =
        ks.iter().flat_map(|&k| families.iter().map(move |&f| (k, f))).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty model candidate set".into()));
    }
    let n = data.nrows();
    let d = data.ncols();
    let fit_one = |&(k, family): &(usize, CovarianceFamily)| {
        fit_gmm(data, k, family, stats::derive_seed(seed, &[k as u64, family.index()]))
    };
    #[cfg(feature = "parallel")]
    let fits: Vec<Result<GmmFit>> = {
        use rayon::prelude::*;
        candidates.par_iter().map(fit_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let fits: Vec<Result<GmmFit>> = candidates.iter().map(fit_one).collect();

    let table: Vec<BicEntry> = candidates
        .iter()
        .zip(&fits)
        .map(|(&(k, family), f)| match f {
            Ok(fit) => BicEntry {
                k,
                family,
                bic: Some(bic(fit, n)),
                loglik: Some(fit.log_likelihood),
                n_params: fit.n_params,
                error: None,
            },
            Err(e) => BicEntry {
                k,
                family,
                bic: None,
                loglik: None,
                n_params: if k >= 1 { n_params(k, d, family) } else { 0 },
                error: Some(e.to_string()),
            },
        })
        .collect();
    let winner = best_bic_entry(&table).ok_or_else(|| {
        let first = table.iter().find_map(|e| e.error.clone()).unwrap_or_default();
        Error::Degenerate(format!("every mixture candidate failed: {first}"))
    })?;
    let fit = fits.into_iter().nth(winner).expect("winner index in range")?;
    Ok(ClusterAssignment {
        labels: fit.labels(),
        bic: table[winner].bic.expect("winner has a score"),
        fit,
        bic_table: table,
    })
}

/// Renames classes so class 0 has the lowest mean response, class 1 the
/// next, and so on. `response[i]` belongs to `labels[i]`.
pub fn relabel_by_response(labels: &[usize], response: &[f64]) -> Vec<usize> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![(0.0, 0usize); k];
    for (&l, &y) in labels.iter().zip(response) {
        sums[l].0 += y;
        sums[l].1 += 1;
    }
    let mut order: Vec<usize> = (0..k).filter(|&c| sums[c].1 > 0).collect();
    order.sort_by(|&a, &b| {
        let ma = sums[a].0 / sums[a].1 as f64;
        let mb = sums[b].0 / sums[b].1 as f64;
        ma.total_cmp(&mb).then(a.cmp(&b))
    });
    let mut map = vec![usize::MAX; k];
    for (new, &old) in order.iter().enumerate() {
        map[old] = new;
    }
    labels.iter().map(|&l| map[l]).collect()
}

/// Class letter for a zero-based class id (A, B, ..., Z, AA, ...).
pub fn class_name(id: usize) -> String {
    let mut s = Vec::new();
    let mut i = id + 1;
    while i > 0 {
        i -= 1;
        s.push(b'A' + (i % 26) as u8);
        i /= 26;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    /// `None` when no member has a value.
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            Summary { n: 0, mean: None, median: None }
        } else {
            Summary {
                n: values.len(),
                mean: Some(stats::mean(values)),
                median: Some(stats::median(values)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_id: usize,
    pub class_name: String,
    pub size: usize,
    pub response: Summary,
    pub factors: Vec<(String, Summary)>,
}

/// Per-class descriptive statistics. `labels[i]` is the class of table row
/// `i`; classes without members get size 0 and empty summaries.
pub fn class_profile(labels: &[usize], n_classes: usize, table: &FactorTable) -> Result<Vec<ClassProfile>> {
    if labels.len() != table.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} table rows",
            labels.len(),
            table.n_rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n_classes}")));
    }
    Ok((0..n_classes)
        .map(|c| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let response: Vec<f64> = members.iter().filter_map(|&i| table.response()[i]).collect();
            ClassProfile {
                class_id: c,
                class_name: class_name(c),
                size: members.len(),
                response: Summary::of(&response),
                factors: table
                    .factors()
                    .iter()
                    .map(|f| {
                        let v: Vec<f64> = members.iter().filter_map(|&i| f.values[i]).collect();
                        (f.name.clone(), Summary::of(&v))
                    })
                    .collect(),
            }
        })
        .collect())
}
