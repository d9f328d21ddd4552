//! Acceptance run: one line per criterion, nonzero exit on any failure.
//!
//! The real-data check needs neighborhood tables. Point `OPENHEALTH_REFERENCE_CONFIG`
//! at a run config to enable it; `OPENHEALTH_REFERENCE_WINNER` overrides the
//! expected all-neighborhood factor names (comma separated).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use openhealth_core::cluster::{self, CovarianceFamily};
use openhealth_core::dimred;
use openhealth_core::gam::{self, GamConfig, LambdaPolicy};
use openhealth_core::ingest::{self, FactorColumn, FactorGroup, FactorTable, SmoothFn, SyntheticSpec};
use openhealth_core::pipeline::{self, RunConfig, RunContext, SelectionReport, Stage};
use openhealth_core::plume::{self, FacilityRecord, PlumeParams, WindRose, WindSector};
use openhealth_core::select::{self, ExclusivityGroup, SelectConfig, SubsetScore};
use openhealth_core::stats;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn normal(rng: &mut stats::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn table_from(columns: &[(&str, Vec<f64>)], y: &[f64]) -> FactorTable {
    let n = y.len();
    FactorTable::new(
        (0..n).map(|i| format!("R{i:04}")).collect(),
        (0..n).map(|i| format!("row {i}")).collect(),
        vec![(43.7, -79.4); n],
        "response",
        y.iter().map(|v| Some(*v)).collect(),
        columns
            .iter()
            .map(|(name, v)| FactorColumn {
                name: name.to_string(),
                description: name.to_string(),
                group: FactorGroup::NonEnv,
                values: v.iter().map(|x| Some(*x)).collect(),
            })
            .collect(),
    )
    .expect("valid table")
}

// ---------------------------------------------------------------- 1

fn gam_vs_ols() -> Outcome {
    let n = 500;
    let mut rng = stats::seeded_rng(11);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 + 1.7 * v).collect();

    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;

    let start = Instant::now();
    let fit = match gam::fit_gam_columns(&[("x", &x)], &y, &GamConfig::default(), &LambdaPolicy::Gcv) {
        Ok(f) => f,
        Err(e) => return Outcome::Fail(format!("fit failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let err = x
        .iter()
        .zip(&fit.fitted)
        .map(|(xi, fi)| (icept + slope * xi - fi).abs())
        .fold(0.0, f64::max);
    let edf = fit.terms[0].edf;
    check(
        err < 1e-6 && edf <= 1.5 && secs < 1.0,
        format!("max |gam - ols| = {err:.2e}, edf = {edf:.4}, {secs:.3} s"),
    )
}

// ---------------------------------------------------------------- 2

fn central_difference(f: &dyn Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    (0..at.len())
        .map(|j| {
            let h = 1e-5 * at[j].abs().max(1.0);
            let mut p = at.to_vec();
            let mut m = at.to_vec();
            p[j] += h;
            m[j] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn gam_recovery() -> Outcome {
    let n = 200;
    let mut rng = stats::seeded_rng(2024);
    let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let signal: Vec<f64> = x1
        .iter()
        .zip(&x2)
        .map(|(a, b)| (2.0 * std::f64::consts::PI * a).sin() + 1.5 * b * b)
        .collect();
    let y: Vec<f64> = signal.iter().map(|s| 5.0 + s + 0.4 * normal(&mut rng)).collect();

    let my = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let noise_ss: f64 = y.iter().zip(&signal).map(|(v, s)| (v - 5.0 - s).powi(2)).sum();
    let planted_r2 = 1.0 - noise_ss / tss;

    let fit = match gam::fit_gam_columns(&[("x1", &x1), ("x2", &x2)], &y, &GamConfig::default(), &LambdaPolicy::Gcv)
    {
        Ok(f) => f,
        Err(e) => return Outcome::Fail(format!("fit failed: {e}")),
    };
    let dev = fit.deviance_explained;

    let beta = fit.coefficients();
    let objective = |b: &[f64]| fit.penalized_objective(b);
    let fd_hat = central_difference(&objective, &beta);
    let fd_zero = central_difference(&objective, &vec![0.0; beta.len()]);
    let scale = fd_zero.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let analytic = fit.penalized_gradient(&beta);
    let stationarity = fd_hat.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / scale;
    let agreement = fd_hat
        .iter()
        .zip(&analytic)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        / scale;

    check(
        (dev - planted_r2).abs() <= 0.05 && stationarity <= 1e-5 && agreement <= 1e-5,
        format!(
            "deviance explained {dev:.4} vs planted R2 {planted_r2:.4}; relative gradient {stationarity:.1e} (fd), {agreement:.1e} (fd vs analytic)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn edf_limits() -> Outcome {
    let n = 200;
    let mut rng = stats::seeded_rng(3);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| 2.0 + (2.0 * std::f64::consts::PI * v).sin() + 0.3 * normal(&mut rng))
        .collect();
    let cfg = GamConfig::default();
    let edf_at = |lambda: f64| {
        gam::fit_gam_columns(&[("x", &x)], &y, &cfg, &LambdaPolicy::Fixed(vec![lambda])).map(|f| f.terms[0].edf)
    };
    let (hi, lo) = match (edf_at(1e8), edf_at(1e-8)) {
        (Ok(h), Ok(l)) => (h, l),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(format!("fit failed: {e}")),
    };
    let mut grid = vec![1e-8];
    grid.extend(cfg.lambda_grid());
    grid.push(1e8);
    let mut edfs = Vec::with_capacity(grid.len());
    for &l in &grid {
        match edf_at(l) {
            Ok(e) => edfs.push(e),
            Err(e) => return Outcome::Fail(format!("fit at lambda {l} failed: {e}")),
        }
    }
    let rises = edfs.windows(2).filter(|w| w[1] > w[0] + 1e-9).count();
    let kmax = (cfg.k - 1) as f64;
    check(
        (hi - 1.0).abs() <= 0.05 && (lo - kmax).abs() <= 0.05 && rises == 0,
        format!(
            "edf {hi:.4} at 1e8, {lo:.4} at 1e-8 (k-1 = {kmax}); {rises} increases over {} lambdas",
            grid.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn blobs(n_per: usize, centers: &[(f64, f64)], sd: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = stats::seeded_rng(seed);
    let n = n_per * centers.len();
    let mut m = DMatrix::zeros(n, 2);
    for (c, &(cx, cy)) in centers.iter().enumerate() {
        for i in 0..n_per {
            m[(c * n_per + i, 0)] = cx + sd * normal(&mut rng);
            m[(c * n_per + i, 1)] = cy + sd * normal(&mut rng);
        }
    }
    m
}

fn em_monotonicity() -> Outcome {
    let data = blobs(50, &[(0.0, 0.0), (3.0, 0.5), (1.0, 3.0)], 1.0, 99);
    let mut violations = 0;
    let mut steps = 0;
    let mut failures = Vec::new();
    for run in 0..100u64 {
        let k = 1 + (run % 5) as usize;
        let family = CovarianceFamily::ALL[(run % 3) as usize];
        match cluster::fit_gmm(&data, k, family, run) {
            Ok(fit) => {
                steps += fit.loglik_trace.len().saturating_sub(1);
                violations += fit.loglik_trace.windows(2).filter(|w| w[1] < w[0] - 1e-9).count();
                violations += fit.monotonicity_violations;
            }
            Err(e) => failures.push(format!("run {run} (K={k}, {family:?}): {e}")),
        }
    }
    check(
        violations == 0 && failures.is_empty(),
        format!(
            "{violations} decreases over {steps} EM steps in 100 runs; {} failed fits{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(a.len() as f64);
    let max = (sa + sb) / 2.0;
    (index - expected) / (max - expected)
}

fn cluster_spec() -> SyntheticSpec {
    let p = 12;
    let mut means = vec![vec![0.0; p]; 3];
    for j in 0..4 {
        means[1][j] = 5.0;
        means[2][4 + j] = 5.0;
    }
    let mut smooths = vec![SmoothFn::Zero; p];
    smooths[0] = SmoothFn::Linear { slope: 1.0 };
    SyntheticSpec {
        n_neighborhoods: 130,
        n_factors: p,
        n_classes: 3,
        class_proportions: vec![61.0 / 130.0, 11.0 / 130.0, 58.0 / 130.0],
        class_means: means,
        class_sds: vec![vec![1.0; p]; 3],
        smooth_functions: smooths,
        noise_sd: 1.0,
        seed: 5,
        response_intercept: 50.0,
        class_response_offsets: vec![],
        factor_names: vec![],
        exact_class_sizes: true,
    }
}

fn cluster_recovery() -> Outcome {
    let spec = cluster_spec();
    let truth = match ingest::generate_synthetic(&spec) {
        Ok(d) => d.labels,
        Err(e) => return Outcome::Fail(format!("generator failed: {e}")),
    };
    let dir = tempfile::tempdir().expect("tempdir");
    std::fs::write(dir.path().join("spec.json"), serde_json::to_vec(&spec).expect("spec json")).expect("write spec");
    let cfg = r#"{"seed": 17, "inputs": {"synthetic": "spec.json"}, "response_column": "response"}"#;
    let config = RunConfig::from_json(cfg, dir.path()).expect("config");
    let ctx = RunContext::new(config, None, Some(dir.path().join("out"))).expect("context");

    let start = Instant::now();
    for stage in [Stage::Ingest, Stage::Cluster] {
        if let Err(e) = pipeline::run_stage(&ctx, stage) {
            return Outcome::Fail(format!("{stage:?} failed: {e}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();

    let report: pipeline::ClusterReport =
        serde_json::from_slice(&std::fs::read(ctx.out_dir.join("profiles.json")).expect("profiles")).expect("json");
    let mut assigned = BTreeMap::new();
    let mut r = csv::Reader::from_path(ctx.out_dir.join("clusters.csv")).expect("clusters.csv");
    for rec in r.records() {
        let rec = rec.expect("record");
        assigned.insert(rec[0].to_string(), rec[1].to_string());
    }
    let ids: Vec<String> = (0..130).map(|i| format!("N{:03}", i + 1)).collect();
    let names: Vec<&String> = ids.iter().map(|id| &assigned[id]).collect();
    let mut codes: Vec<&String> = names.clone();
    codes.sort();
    codes.dedup();
    let found: Vec<usize> = names.iter().map(|n| codes.iter().position(|c| c == n).expect("code")).collect();
    let ari = adjusted_rand(&truth, &found);
    let k = report.selected.k;
    check(
        k == 3 && ari >= 0.9 && secs < 30.0,
        format!("K = {k} ({:?}), ARI = {ari:.4}, {secs:.2} s", report.selected.family),
    )
}

// ---------------------------------------------------------------- 6

fn pca_checks() -> Outcome {
    let (n, p) = (130, 12);
    let mut rng = stats::seeded_rng(6);
    let loadings: Vec<Vec<f64>> = (0..2).map(|_| (0..p).map(|_| normal(&mut rng)).collect()).collect();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let f = [3.0 * normal(&mut rng), 2.0 * normal(&mut rng)];
        for j in 0..p {
            x[(i, j)] = f[0] * loadings[0][j] + f[1] * loadings[1][j] + 0.1 * normal(&mut rng);
        }
    }
    let model = match dimred::fit_pca(&x) {
        Ok(m) => m,
        Err(e) => return Outcome::Fail(format!("pca failed: {e}")),
    };
    let v = DMatrix::from_fn(p, model.n_components(), |r, c| model.components[c][r]);
    let gram = (v.transpose() * &v - DMatrix::identity(v.ncols(), v.ncols())).abs().max();
    let ve = dimred::variance_explained(&model, 2);

    let full = DMatrix::from_fn(40, 6, |_, _| normal(&mut rng));
    let fm = dimred::fit_pca(&full).expect("full-rank pca");
    let scores = dimred::project(&fm, &full, 6).expect("projection");
    let recon = (fm.reconstruct(&scores).expect("reconstruct") - &full).abs().max();
    check(
        gram < 1e-10 && ve >= 0.95 && recon < 1e-8,
        format!("Gram error {gram:.1e}, two-component variance {ve:.4}, reconstruction error {recon:.1e}"),
    )
}

// ---------------------------------------------------------------- 7

fn oracle_risk(fac: &[FacilityRecord], target: (f64, f64), sectors: Option<&[WindSector]>, p: &PlumeParams) -> f64 {
    let r = 6371.0088;
    let rad = std::f64::consts::PI / 180.0;
    let mut sum = 0.0;
    for f in fac {
        let (p1, p2) = (f.lat * rad, target.0 * rad);
        let dl = (target.1 - f.lon) * rad;
        let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        let d = 2.0 * r * h.sqrt().asin();
        let dens = (-(d - p.mu_km).powi(2) / (2.0 * p.sigma_km * p.sigma_km)).exp()
            / (p.sigma_km * (2.0 * std::f64::consts::PI).sqrt());
        let mut w = 1.0;
        if let Some(secs) = sectors {
            let yb = dl.sin() * p2.cos();
            let xb = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
            let mut b = yb.atan2(xb) / rad;
            if b < 0.0 {
                b += 360.0;
            }
            if b >= 360.0 {
                b -= 360.0;
            }
            for s in secs {
                let (inside, width) = if s.start_deg < s.end_deg {
                    (b >= s.start_deg && b < s.end_deg, s.end_deg - s.start_deg)
                } else {
                    (b >= s.start_deg || b < s.end_deg, 360.0 - s.start_deg + s.end_deg)
                };
                if inside {
                    w = s.frequency * 360.0 / width;
                }
            }
        }
        let tep: f64 = f.tep_values.iter().sum();
        sum += tep * dens * w;
    }
    (p.epsilon + sum).ln()
}

fn random_facilities(rng: &mut stats::Rng, count: usize) -> Vec<FacilityRecord> {
    (0..count)
        .map(|i| FacilityRecord {
            facility_id: format!("F{i}"),
            lat: 43.6 + 0.25 * rng.random::<f64>(),
            lon: -79.6 + 0.45 * rng.random::<f64>(),
            years: vec![2015, 2016],
            tep_values: vec![rng.random::<f64>() * 50.0, rng.random::<f64>() * 50.0],
        })
        .collect()
}

fn plume_checks() -> Outcome {
    let freqs = [0.05, 0.10, 0.20, 0.15, 0.10, 0.15, 0.15, 0.10];
    let sectors: Vec<WindSector> = (0..8)
        .map(|i| WindSector {
            start_deg: (337.5 + 45.0 * i as f64) % 360.0,
            end_deg: (22.5 + 45.0 * i as f64) % 360.0,
            frequency: freqs[i],
        })
        .collect();
    let rose = WindRose::new(sectors.clone()).expect("rose");
    let params = PlumeParams { mu_km: 2.5, sigma_km: 1.3, epsilon: 1.0 };
    let mut rng = stats::seeded_rng(7);
    let mut worst = 0.0_f64;
    let mut evaluated = 0;
    for count in 1..=10 {
        let fac = random_facilities(&mut rng, count);
        for _ in 0..20 {
            let target = (43.6 + 0.25 * rng.random::<f64>(), -79.6 + 0.45 * rng.random::<f64>());
            for with_rose in [false, true] {
                let lib = plume::neighborhood_risk(&fac, target, with_rose.then_some(&rose), &params);
                let want = oracle_risk(&fac, target, with_rose.then_some(sectors.as_slice()), &params);
                match lib {
                    Ok(v) => worst = worst.max((v - want).abs()),
                    Err(e) => return Outcome::Fail(format!("risk failed: {e}")),
                }
                evaluated += 1;
            }
        }
    }

    let fac = random_facilities(&mut rng, 6);
    let n = 90;
    let centroids: Vec<(f64, f64)> =
        (0..n).map(|_| (43.6 + 0.25 * rng.random::<f64>(), -79.6 + 0.45 * rng.random::<f64>())).collect();
    let planted = PlumeParams { sigma_km: 2.0, ..params };
    let response: Vec<Option<f64>> = centroids
        .iter()
        .map(|&c| {
            let r = plume::neighborhood_risk(&fac, c, Some(&rose), &planted).expect("risk");
            Some(10.0 + 4.0 * r + 0.05 * normal(&mut rng))
        })
        .collect();
    let table = FactorTable::new(
        (0..n).map(|i| format!("N{i}")).collect(),
        (0..n).map(|i| format!("n{i}")).collect(),
        centroids,
        "response",
        response,
        vec![],
    )
    .expect("table");
    let tuned = match plume::tune_sigma(&fac, &table, Some(&rose), &params, &[1.0, 2.0, 3.0]) {
        Ok(t) => t.sigma_km,
        Err(e) => return Outcome::Fail(format!("tune_sigma failed: {e}")),
    };
    check(
        worst <= 1e-10 && tuned == 2.0,
        format!("max |risk - brute force| = {worst:.1e} over {evaluated} evaluations; tuned sigma = {tuned}"),
    )
}

// ---------------------------------------------------------------- 8

fn brute_force_order(a: &SubsetScore, b: &SubsetScore) -> std::cmp::Ordering {
    let key = |s: &SubsetScore| {
        let mut names = s.factors.clone();
        names.sort();
        (s.deviance_explained.is_none(), !s.all_significant, names)
    };
    let (fa, sa, na) = key(a);
    let (fb, sb, nb) = key(b);
    fa.cmp(&fb)
        .then(sa.cmp(&sb))
        .then_with(|| {
            let da = a.deviance_explained.unwrap_or(0.0);
            let db = b.deviance_explained.unwrap_or(0.0);
            db.partial_cmp(&da).expect("finite deviance")
        })
        .then(a.factors.len().cmp(&b.factors.len()))
        .then(na.cmp(&nb))
}

fn subset_oracle() -> Outcome {
    let p = 8;
    let mut smooths = vec![SmoothFn::Zero; p];
    smooths[1] = SmoothFn::Sine { amplitude: 2.0, period: 4.0 };
    smooths[3] = SmoothFn::Linear { slope: 1.0 };
    smooths[5] = SmoothFn::Quadratic { coef: 0.5, center: 0.0 };
    let spec = SyntheticSpec {
        n_neighborhoods: 120,
        n_factors: p,
        n_classes: 1,
        class_proportions: vec![1.0],
        class_means: vec![vec![0.0; p]],
        class_sds: vec![vec![2.0; p]],
        smooth_functions: smooths,
        noise_sd: 1.5,
        seed: 8,
        response_intercept: 40.0,
        class_response_offsets: vec![],
        factor_names: vec![],
        exact_class_sizes: false,
    };
    let table = ingest::generate_synthetic(&spec).expect("synthetic").table;
    let factors = table.factor_names();
    let groups = vec![ExclusivityGroup {
        name: "pair".into(),
        members: vec![factors[0].clone(), factors[1].clone()],
    }];
    let scfg = SelectConfig { max_size: 6, budget: 5000, ..SelectConfig::default() };
    let gcfg = GamConfig::default();
    let lib = match select::search_best_group(&table, &factors, &groups, &scfg, &gcfg) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("search failed: {e}")),
    };

    let mut brute: Vec<SubsetScore> = Vec::new();
    for mask in 1u32..(1 << p) {
        if mask.count_ones() as usize > scfg.max_size || mask & 0b11 == 0b11 {
            continue;
        }
        let names: Vec<String> = (0..p).filter(|j| mask >> j & 1 == 1).map(|j| factors[j].clone()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        brute.push(match gam::fit_gam(&table, &refs, &gcfg, &LambdaPolicy::Gcv) {
            Ok(fit) => SubsetScore {
                all_significant: fit.terms.iter().all(|t| t.p_value <= scfg.threshold),
                deviance_explained: Some(fit.deviance_explained),
                fit: Some(fit.summary()),
                factors: names,
                error: None,
            },
            Err(e) => SubsetScore {
                factors: names,
                fit: None,
                all_significant: false,
                deviance_explained: None,
                error: Some(e.to_string()),
            },
        });
    }
    brute.sort_by(brute_force_order);
    let best = brute
        .iter()
        .filter(|s| s.all_significant)
        .filter_map(|s| s.deviance_explained)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<&SubsetScore> = brute
        .iter()
        .filter(|s| s.all_significant && s.deviance_explained.is_some_and(|d| d >= best - 1e-6))
        .collect();
    tied.sort_by_key(|s| {
        let mut n = s.factors.clone();
        n.sort();
        (s.factors.len(), n)
    });
    let want = tied.first().map(|s| s.factors.clone());
    let got = lib.winner.as_ref().map(|w| w.factors.clone());

    let same_ranking = lib.ranked.len() == brute.len()
        && lib.ranked.iter().zip(&brute).all(|(a, b)| {
            a.factors == b.factors
                && a.all_significant == b.all_significant
                && a.deviance_explained.map(f64::to_bits) == b.deviance_explained.map(f64::to_bits)
        });
    check(
        lib.exhaustive && got == want && same_ranking && want.is_some(),
        format!(
            "{} candidates, winner {:?} (brute force {:?}), rankings {}",
            brute.len(),
            got.unwrap_or_default(),
            want.unwrap_or_default(),
            if same_ranking { "identical" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------- 9

fn null_calibration() -> Outcome {
    let n = 130;
    let mut passes = 0;
    let mut failures = 0;
    for seed in 0..200u64 {
        let mut rng = stats::seeded_rng(10_000 + seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let y: Vec<f64> = (0..n).map(|_| 50.0 + 2.0 * normal(&mut rng)).collect();
        let table = table_from(&[("noise", x)], &y);
        let scan = select::single_factor_scan(&table, &["noise".to_string()], &GamConfig::default(), 0.10);
        match &scan[0] {
            s if s.error.is_some() => failures += 1,
            s if s.all_significant => passes += 1,
            _ => {}
        }
    }
    let rate = passes as f64 / 200.0;
    check(
        rate <= 0.25 && failures == 0,
        format!("noise factor passed the filter in {passes}/200 replicates ({:.1}%), {failures} failed fits", 100.0 * rate),
    )
}

// ---------------------------------------------------------------- 10

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("prefix").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    out
}

fn end_to_end() -> Outcome {
    let root = repo_root().join("data/synthetic");
    let config = match pipeline::load_config(root.join("run.json")) {
        Ok(c) => c,
        Err(e) => return Outcome::Fail(format!("config: {e}")),
    };
    let spec = ingest::load_synthetic_spec(root.join("spec.json")).expect("bundled spec");
    let planted: Vec<String> = (0..spec.n_factors)
        .filter(|&j| spec.smooth_functions[j].is_signal())
        .map(|j| spec.factor_name(j))
        .collect();

    let dir = tempfile::tempdir().expect("tempdir");
    let mut times = Vec::new();
    let mut trees = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let ctx = RunContext::new(config.clone(), None, Some(out.clone())).expect("context");
        let start = Instant::now();
        if let Err(e) = pipeline::run_pipeline(&ctx) {
            return Outcome::Fail(format!("run {run} failed: {e}"));
        }
        times.push(start.elapsed().as_secs_f64());
        trees.push(tree(&out));
    }
    let identical = trees[0] == trees[1];
    let sel: SelectionReport =
        serde_json::from_slice(&trees[0][Path::new("selection.json")]).expect("selection.json");
    let winner = sel.result.winner.map(|w| w.factors).unwrap_or_default();
    let missing: Vec<&String> = planted.iter().filter(|f| !winner.contains(f)).collect();
    let spurious = winner.iter().filter(|f| !planted.contains(f)).count();
    check(
        identical && times.iter().all(|t| *t < 60.0) && missing.is_empty() && spurious <= 1,
        format!(
            "{} files {}, runs {:.2} s / {:.2} s, winner {winner:?} (planted {planted:?}, {spurious} spurious)",
            trees[0].len(),
            if identical { "byte-identical" } else { "DIFFER" },
            times[0],
            times[1]
        ),
    )
}

// ---------------------------------------------------------------- 11

fn real_data() -> Outcome {
    let Ok(path) = std::env::var("OPENHEALTH_REFERENCE_CONFIG") else {
        return Outcome::Skip("set OPENHEALTH_REFERENCE_CONFIG to a run config over the real tables".into());
    };
    let expected: Vec<String> = std::env::var("OPENHEALTH_REFERENCE_WINNER")
        .unwrap_or_else(|_| "immigrants,mental_health_visits,industrial_pollution,green_space".into())
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let config = match pipeline::load_config(&path) {
        Ok(c) => c,
        Err(e) => return Outcome::Fail(format!("config: {e}")),
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let ctx = match RunContext::new(config, None, Some(dir.path().join("out"))) {
        Ok(c) => c,
        Err(e) => return Outcome::Fail(format!("config: {e}")),
    };
    if let Err(e) = pipeline::run_pipeline(&ctx) {
        return Outcome::Fail(format!("pipeline failed: {e}"));
    }
    let report: pipeline::Report =
        serde_json::from_slice(&std::fs::read(ctx.out_dir.join("report.json")).expect("report")).expect("json");
    let mut sizes: Vec<usize> = report.clustering.class_sizes.iter().map(|c| c.size).collect();
    sizes.sort_unstable();
    let scope_by_size = |size: usize| {
        let class = report.clustering.class_sizes.iter().find(|c| c.size == size)?;
        report.selections.iter().find(|s| s.scope == class.class)
    };
    let all = report.selections.iter().find(|s| s.scope == "all");
    let dev = |s: Option<&pipeline::ScopeSummary>| s.and_then(|s| s.deviance_explained).unwrap_or(f64::NAN);
    let (d_all, d_b, d_c) = (dev(all), dev(scope_by_size(11)), dev(scope_by_size(58)));
    let single_b = scope_by_size(11).is_some_and(|s| s.mode == select::SelectionMode::SingleFactor);
    let mut winner = all.and_then(|s| s.winner.clone()).unwrap_or_default();
    winner.sort();
    let mut want = expected.clone();
    want.sort();
    check(
        sizes == [11, 58, 61]
            && (d_all - 0.481).abs() <= 0.05
            && (d_b - 0.663).abs() <= 0.05
            && single_b
            && (d_c - 0.807).abs() <= 0.05
            && winner == want,
        format!("class sizes {sizes:?}; deviance {d_all:.3} all, {d_b:.3} B, {d_c:.3} C; winner {winner:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gam matches ols on linear data", gam_vs_ols),
        ("gam recovers planted signal", gam_recovery),
        ("edf limits and monotonicity", edf_limits),
        ("em log-likelihood monotone", em_monotonicity),
        ("cluster recovery on 130x12 table", cluster_recovery),
        ("pca orthonormality, variance, reconstruction", pca_checks),
        ("plume brute-force oracle and sigma recovery", plume_checks),
        ("subset search equals brute force", subset_oracle),
        ("null factor calibration", null_calibration),
        ("bundled pipeline end to end", end_to_end),
        ("real-data reproduction", real_data),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (tag, detail) = match f() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
