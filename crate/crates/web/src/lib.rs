//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes plain numbers or typed arrays and returns a JSON
//! string. The `*_json` functions hold the logic so they can be tested on
//! the host.

use nalgebra::DMatrix;
use openhealth_core::cluster::{self, CovarianceFamily};
use openhealth_core::gam::{self, GamConfig, LambdaPolicy};
use openhealth_core::plume::{self, FacilityRecord, PlumeParams, WindRose};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct RiskField {
    nx: usize,
    ny: usize,
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    /// Row-major, `ny` rows from north to south.
    values: Vec<f64>,
    min: f64,
    max: f64,
}

/// Risk over an `nx` by `ny` grid. `facilities` is flat
/// `[lat, lon, tep, lat, lon, tep, ...]`; `wind` holds sector frequencies
/// for equal sectors starting at north, or is empty for no rose.
#[allow(clippy::too_many_arguments)]
pub fn risk_field_json(
    facilities: &[f64],
    wind: &[f64],
    mu_km: f64,
    sigma_km: f64,
    epsilon: f64,
    bounds: [f64; 4],
    nx: usize,
    ny: usize,
) -> Result<String, String> {
    if !facilities.len().is_multiple_of(3) {
        return Err("facilities must be lat, lon, tep triples".into());
    }
    if nx < 2 || ny < 2 || nx * ny > 250_000 {
        return Err("grid must be at least 2x2 and at most 250000 cells".into());
    }
    let fac: Vec<FacilityRecord> = facilities
        .chunks(3)
        .enumerate()
        .map(|(i, c)| FacilityRecord {
            facility_id: format!("F{i}"),
            lat: c[0],
            lon: c[1],
            years: vec![0],
            tep_values: vec![c[2]],
        })
        .collect();
    let rose = if wind.is_empty() {
        None
    } else {
        let total: f64 = wind.iter().sum();
        if !(total > 0.0) {
            return Err("wind frequencies must sum to a positive value".into());
        }
        let n = wind.len();
        let w = 360.0 / n as f64;
        let sectors = wind
            .iter()
            .enumerate()
            .map(|(i, f)| plume::WindSector {
                start_deg: i as f64 * w,
                end_deg: if i + 1 == n { 360.0 } else { (i + 1) as f64 * w },
                frequency: f / total,
            })
            .collect();
        Some(WindRose::new(sectors).map_err(|e| e.to_string())?)
    };
    let params = PlumeParams { mu_km, sigma_km, epsilon };
    let [lat_min, lat_max, lon_min, lon_max] = bounds;
    let mut values = Vec::with_capacity(nx * ny);
    for r in 0..ny {
        let lat = lat_max - (lat_max - lat_min) * r as f64 / (ny - 1) as f64;
        for c in 0..nx {
            let lon = lon_min + (lon_max - lon_min) * c as f64 / (nx - 1) as f64;
            values.push(plume::neighborhood_risk(&fac, (lat, lon), rose.as_ref(), &params).map_err(|e| e.to_string())?);
        }
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    to_json(&RiskField { nx, ny, lat_min, lat_max, lon_min, lon_max, values, min, max })
}

#[derive(Serialize)]
struct SmoothFit {
    x: Vec<f64>,
    /// Smooth plus intercept, on the response scale.
    fit: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    edf: f64,
    lambda: f64,
    p_value: f64,
    deviance_explained: f64,
}

/// Single-smooth GAM with GCV smoothing and bands at plus/minus two standard errors.
pub fn gam_smooth_json(x: &[f64], y: &[f64], k: usize, points: usize) -> Result<String, String> {
    let cfg = GamConfig { k, ..GamConfig::default() };
    let fit = gam::fit_gam_columns(&[("x", x)], y, &cfg, &LambdaPolicy::Gcv).map_err(|e| e.to_string())?;
    let curve = gam::smooth_curve(&fit, "x", points.max(2)).map_err(|e| e.to_string())?;
    let shift = |v: Vec<f64>| v.into_iter().map(|s| s + fit.intercept).collect();
    let term = &fit.terms[0];
    to_json(&SmoothFit {
        x: curve.x,
        fit: shift(curve.fit),
        lower: shift(curve.lower),
        upper: shift(curve.upper),
        edf: term.edf,
        lambda: term.lambda,
        p_value: term.p_value,
        deviance_explained: fit.deviance_explained,
    })
}

#[derive(Serialize)]
struct BicCell {
    k: usize,
    family: CovarianceFamily,
    bic: Option<f64>,
}

#[derive(Serialize)]
struct Clustering {
    k: usize,
    family: CovarianceFamily,
    labels: Vec<usize>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    bic: Vec<BicCell>,
}

/// BIC sweep over K = 1..=k_max and all covariance families on 2-D points.
pub fn gmm_cluster_json(xs: &[f64], ys: &[f64], k_max: usize, seed: u64) -> Result<String, String> {
    if xs.len() != ys.len() {
        return Err("x and y differ in length".into());
    }
    let n = xs.len();
    let data = DMatrix::from_fn(n, 2, |i, j| if j == 0 { xs[i] } else { ys[i] });
    let ks: Vec<usize> = (1..=k_max.clamp(1, 8).min(n.max(1))).collect();
    let a = cluster::select_model(&data, &ks, &CovarianceFamily::ALL, seed).map_err(|e| e.to_string())?;
    to_json(&Clustering {
        k: a.fit.k,
        family: a.fit.family,
        labels: a.labels,
        means: a.fit.means,
        covariances: a.fit.covariances,
        bic: a
            .bic_table
            .into_iter()
            .map(|e| BicCell { k: e.k, family: e.family, bic: e.bic })
            .collect(),
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn risk_field(
    facilities: &[f64],
    wind: &[f64],
    mu_km: f64,
    sigma_km: f64,
    epsilon: f64,
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    nx: usize,
    ny: usize,
) -> Result<String, JsError> {
    risk_field_json(facilities, wind, mu_km, sigma_km, epsilon, [lat_min, lat_max, lon_min, lon_max], nx, ny)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gam_smooth(x: &[f64], y: &[f64], k: usize, points: usize) -> Result<String, JsError> {
    gam_smooth_json(x, y, k, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gmm_cluster(xs: &[f64], ys: &[f64], k_max: usize, seed: u64) -> Result<String, JsError> {
    gmm_cluster_json(xs, ys, k_max, seed).map_err(|e| JsError::new(&e))
}
