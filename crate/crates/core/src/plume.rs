//! Industrial pollution exposure: pooled facility TEP, Gaussian distance
//! profile and wind-rose weighting, combined on a softened log scale.
//!
//! For a target location the score is
//! `ln(epsilon + sum_A tep(A) * density(dist(A, target)) * wind(bearing(A -> target)))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingest::FactorTable;
use crate::stats;
use crate::{Error, Result};

/// Mean Earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityRecord {
    pub facility_id: String,
    pub lat: f64,
    pub lon: f64,
    /// Reporting years pooled into this record.
    pub years: Vec<i32>,
    pub tep_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindSector {
    pub start_deg: f64,
    pub end_deg: f64,
    pub frequency: f64,
}

impl WindSector {
    /// Angular width; a sector with `end <= start` wraps through north.
    pub fn width(&self) -> f64 {
        if self.end_deg > self.start_deg {
            self.end_deg - self.start_deg
        } else {
            self.end_deg + 360.0 - self.start_deg
        }
    }

    fn contains(&self, bearing: f64) -> bool {
        if self.end_deg > self.start_deg {
            bearing >= self.start_deg && bearing < self.end_deg
        } else {
            bearing >= self.start_deg || bearing < self.end_deg
        }
    }
}

/// Histogram of the directions air moves toward, by angular sector.
/// Meteorological roses give the direction wind blows *from*; rotate those
/// by 180 degrees before building a `WindRose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindRose {
    sectors: Vec<WindSector>,
}

impl WindRose {
    pub fn new(sectors: Vec<WindSector>) -> Result<Self> {
        if sectors.is_empty() {
            return Err(Error::Validation("wind rose has no sectors".into()));
        }
        let mut pieces: Vec<(f64, f64)> = Vec::new();
        for s in &sectors {
            if !(0.0..360.0).contains(&s.start_deg) || !(s.end_deg > 0.0 && s.end_deg <= 360.0) {
                return Err(Error::Validation(format!(
                    "sector [{}, {}) outside [0, 360)",
                    s.start_deg, s.end_deg
                )));
            }
            if !(0.0..=1.0).contains(&s.frequency) {
                return Err(Error::Validation(format!("sector frequency {} outside [0, 1]", s.frequency)));
            }
            if s.end_deg > s.start_deg {
                pieces.push((s.start_deg, s.end_deg));
            } else {
                pieces.push((s.start_deg, 360.0));
                if s.end_deg > 0.0 {
                    pieces.push((0.0, s.end_deg));
                }
            }
        }
        pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cursor = 0.0;
        for (start, end) in &pieces {
            if (start - cursor).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "wind rose sectors overlap or leave a gap near {cursor} degrees"
                )));
            }
            cursor = *end;
        }
        if (cursor - 360.0).abs() > 1e-9 {
            return Err(Error::Validation("wind rose sectors do not reach 360 degrees".into()));
        }
        let total: f64 = sectors.iter().map(|s| s.frequency).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("wind rose frequencies sum to {total}, expected 1")));
        }
        Ok(Self { sectors })
    }

    /// `n` equal sectors starting at north, equal frequency.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("uniform rose needs at least one sector".into()));
        }
        let w = 360.0 / n as f64;
        Self::new(
            (0..n)
                .map(|i| WindSector {
                    start_deg: i as f64 * w,
                    end_deg: if i + 1 == n { 360.0 } else { (i + 1) as f64 * w },
                    frequency: 1.0 / n as f64,
                })
                .collect(),
        )
    }

    pub fn sectors(&self) -> &[WindSector] {
        &self.sectors
    }
}

/// Gaussian distance profile parameters, in km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlumeParams {
    pub mu_km: f64,
    pub sigma_km: f64,
    pub epsilon: f64,
}

impl Default for PlumeParams {
    fn default() -> Self {
        Self {
            mu_km: 2.5,
            sigma_km: 1.0,
            epsilon: 1.0,
        }
    }
}

impl PlumeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_km >= 0.0) || !self.mu_km.is_finite() {
            return Err(Error::Validation(format!("mu_km must be >= 0, got {}", self.mu_km)));
        }
        if !(self.sigma_km > 0.0) || !self.sigma_km.is_finite() {
            return Err(Error::Validation(format!("sigma_km must be > 0, got {}", self.sigma_km)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Validation(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub neighborhood_id: String,
    pub value: f64,
}

/// Total TEP released by a facility.
pub fn facility_tep(facility: &FacilityRecord) -> Result<f64> {
    if let Some(v) = facility.tep_values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "facility '{}' has invalid TEP value {v}",
            facility.facility_id
        )));
    }
    Ok(facility.tep_values.iter().sum())
}

/// Normal density with mean `mu_km` and sd `sigma_km`, evaluated at `d_km`.
pub fn distance_density(d_km: f64, params: &PlumeParams) -> f64 {
    let z = (d_km - params.mu_km) / params.sigma_km;
    (-0.5 * z * z).exp() / (params.sigma_km * (2.0 * std::f64::consts::PI).sqrt())
}

/// Sector frequency at `bearing_deg` divided by the frequency a uniform rose
/// would give that sector (its width over 360). A uniform rose weighs every
/// bearing 1.
pub fn wind_weight(rose: &WindRose, bearing_deg: f64) -> Result<f64> {
    if !(0.0..360.0).contains(&bearing_deg) {
        return Err(Error::InvalidArgument(format!("bearing {bearing_deg} outside [0, 360)")));
    }
    let sector = rose
        .sectors
        .iter()
        .find(|s| s.contains(bearing_deg))
        .ok_or_else(|| Error::Numerical(format!("no sector contains bearing {bearing_deg}")))?;
    Ok(sector.frequency / (sector.width() / 360.0))
}

/// Great-circle (haversine) distance in km.
pub fn great_circle_km(from: (f64, f64), to: (f64, f64)) -> f64 {
    let (lat1, lon1) = (from.0.to_radians(), from.1.to_radians());
    let (lat2, lon2) = (to.0.to_radians(), to.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `from` to `to`, clockwise from north,
/// in `[0, 360)`. Coincident points give 0.
pub fn initial_bearing_deg(from: (f64, f64), to: (f64, f64)) -> f64 {
    let (lat1, lon1) = (from.0.to_radians(), from.1.to_radians());
    let (lat2, lon2) = (to.0.to_radians(), to.1.to_radians());
    let dlon = lon2 - lon1;
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    if deg >= 360.0 {
        0.0
    } else {
        deg
    }
}

fn check_coord(c: (f64, f64)) -> Result<()> {
    if !(-90.0..=90.0).contains(&c.0) || !(-180.0..=180.0).contains(&c.1) {
        return Err(Error::InvalidArgument(format!("invalid coordinate ({}, {})", c.0, c.1)));
    }
    Ok(())
}

/// Log-scale exposure at `target`. Without a rose every direction weighs 1.
pub fn neighborhood_risk(
    facilities: &[FacilityRecord],
    target: (f64, f64),
    rose: Option<&WindRose>,
    params: &PlumeParams,
) -> Result<f64> {
    params.validate()?;
    check_coord(target)?;
    let mut total = 0.0;
    for f in facilities {
        let src = (f.lat, f.lon);
        check_coord(src)?;
        let tep = facility_tep(f)?;
        let density = distance_density(great_circle_km(src, target), params);
        let wind = match rose {
            Some(r) => wind_weight(r, initial_bearing_deg(src, target))?,
            None => 1.0,
        };
        total += tep * density * wind;
    }
    Ok((params.epsilon + total).ln())
}

/// Risk for every row of the table, keyed by neighborhood id.
pub fn risk_scores(
    facilities: &[FacilityRecord],
    table: &FactorTable,
    rose: Option<&WindRose>,
    params: &PlumeParams,
) -> Result<Vec<RiskScore>> {
    table
        .ids()
        .iter()
        .zip(table.centroids())
        .map(|(id, &c)| {
            Ok(RiskScore {
                neighborhood_id: id.clone(),
                value: neighborhood_risk(facilities, c, rose, params)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaCandidate {
    pub sigma_km: f64,
    /// `None` when the risk is constant across rows for this sigma.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaTuning {
    pub sigma_km: f64,
    pub candidates: Vec<SigmaCandidate>,
}

/// Picks the sigma whose risk scores correlate best (Pearson) with the
/// response. Ties go to the smaller sigma.
pub fn tune_sigma(
    facilities: &[FacilityRecord],
    table: &FactorTable,
    rose: Option<&WindRose>,
    base: &PlumeParams,
    candidates: &[f64],
) -> Result<SigmaTuning> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no sigma candidates".into()));
    }
    let rows = table.usable_rows();
    if rows.len() < 3 {
        return Err(Error::Degenerate(format!(
            "sigma tuning needs at least 3 rows with a response, found {}",
            rows.len()
        )));
    }
    let response: Vec<f64> = rows.iter().map(|&i| table.response()[i].unwrap_or(0.0)).collect();
    if stats::sample_sd(&response) == 0.0 {
        return Err(Error::Degenerate("response is constant, correlation undefined".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let mut evaluated = Vec::with_capacity(sorted.len());
    for &sigma in &sorted {
        let params = PlumeParams { sigma_km: sigma, ..*base };
        let risk = rows
            .iter()
            .map(|&i| neighborhood_risk(facilities, table.centroids()[i], rose, &params))
            .collect::<Result<Vec<_>>>()?;
        evaluated.push(SigmaCandidate {
            sigma_km: sigma,
            correlation: stats::pearson(&risk, &response),
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for c in &evaluated {
        if let Some(r) = c.correlation {
            if best.is_none_or(|(_, br)| r > br) {
                best = Some((c.sigma_km, r));
            }
        }
    }
    let (sigma_km, _) =
        best.ok_or_else(|| Error::Degenerate("risk is constant for every sigma candidate".into()))?;
    Ok(SigmaTuning {
        sigma_km,
        candidates: evaluated,
    })
}

/// Writes `pollution_risk.csv` (`neighborhood_id,risk`).
pub fn write_risk_csv(scores: &[RiskScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, risk_to_csv(scores)?).map_err(|e| Error::io(path, e))
}

pub fn risk_to_csv(scores: &[RiskScore]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["neighborhood_id", "risk"])?;
    for s in scores {
        w.write_record([s.neighborhood_id.as_str(), &s.value.to_string()])?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
}

pub fn read_risk_csv(path: impl AsRef<Path>) -> Result<Vec<RiskScore>> {
    #[derive(Deserialize)]
    struct Row {
        neighborhood_id: String,
        risk: f64,
    }
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    reader
        .deserialize::<Row>()
        .map(|r| {
            let r = r?;
            Ok(RiskScore {
                neighborhood_id: r.neighborhood_id,
                value: r.risk,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facility(id: &str, lat: f64, lon: f64, teps: &[f64]) -> FacilityRecord {
        FacilityRecord {
            facility_id: id.into(),
            lat,
            lon,
            years: vec![1995],
            tep_values: teps.to_vec(),
        }
    }

    #[test]
    fn tep_sums() {
        assert_eq!(facility_tep(&facility("a", 0.0, 0.0, &[])).unwrap(), 0.0);
        assert_eq!(facility_tep(&facility("a", 0.0, 0.0, &[2.0, 3.5, 0.5])).unwrap(), 6.0);
        assert_eq!(facility_tep(&facility("a", 0.0, 0.0, &[7.0])).unwrap(), 7.0);
        assert!(facility_tep(&facility("a", 0.0, 0.0, &[1.0, -0.1])).is_err());
    }

    #[test]
    fn density_peak_and_symmetry() {
        let p = PlumeParams::default();
        assert!((distance_density(2.5, &p) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((distance_density(1.5, &p) - distance_density(3.5, &p)).abs() < 1e-15);
        let mut last = distance_density(2.5, &p);
        for i in 1..100 {
            let v = distance_density(2.5 + i as f64 * 0.5, &p);
            assert!(v <= last);
            last = v;
        }
        assert!(last < 1e-100);
    }

    #[test]
    fn uniform_rose_weighs_one() {
        let r = WindRose::uniform(8).unwrap();
        for b in [0.0, 10.0, 44.9, 45.0, 180.0, 359.99] {
            assert!((wind_weight(&r, b).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(wind_weight(&r, 360.0).is_err());
        assert!(wind_weight(&r, -1.0).is_err());
    }

    #[test]
    fn degenerate_rose() {
        let mut sectors: Vec<WindSector> = WindRose::uniform(8).unwrap().sectors().to_vec();
        for (i, s) in sectors.iter_mut().enumerate() {
            s.frequency = if i == 0 { 1.0 } else { 0.0 };
        }
        let r = WindRose::new(sectors).unwrap();
        assert!((wind_weight(&r, 20.0).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(wind_weight(&r, 200.0).unwrap(), 0.0);
    }

    #[test]
    fn half_rose_ratio() {
        let r = WindRose::new(vec![
            WindSector { start_deg: 0.0, end_deg: 180.0, frequency: 0.75 },
            WindSector { start_deg: 180.0, end_deg: 360.0, frequency: 0.25 },
        ])
        .unwrap();
        assert!((wind_weight(&r, 90.0).unwrap() - 1.5).abs() < 1e-12);
        assert!((wind_weight(&r, 270.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrapping_sector() {
        let r = WindRose::new(vec![
            WindSector { start_deg: 315.0, end_deg: 45.0, frequency: 0.5 },
            WindSector { start_deg: 45.0, end_deg: 315.0, frequency: 0.5 },
        ])
        .unwrap();
        assert!((wind_weight(&r, 0.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((wind_weight(&r, 350.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((wind_weight(&r, 90.0).unwrap() - 0.5 / (270.0 / 360.0)).abs() < 1e-12);
    }

    #[test]
    fn rose_validation() {
        let gap = WindRose::new(vec![
            WindSector { start_deg: 0.0, end_deg: 170.0, frequency: 0.5 },
            WindSector { start_deg: 180.0, end_deg: 360.0, frequency: 0.5 },
        ]);
        assert!(gap.is_err());
        let overlap = WindRose::new(vec![
            WindSector { start_deg: 0.0, end_deg: 190.0, frequency: 0.5 },
            WindSector { start_deg: 180.0, end_deg: 360.0, frequency: 0.5 },
        ]);
        assert!(overlap.is_err());
    }

    #[test]
    fn no_facilities_gives_zero() {
        let r = neighborhood_risk(&[], (43.7, -79.4), None, &PlumeParams::default()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn doubling_tep_increases_risk() {
        let p = PlumeParams::default();
        let target = (43.70, -79.40);
        let one = neighborhood_risk(&[facility("a", 43.72, -79.41, &[3.0])], target, None, &p).unwrap();
        let two = neighborhood_risk(&[facility("a", 43.72, -79.41, &[6.0])], target, None, &p).unwrap();
        assert!(two > one);
    }

    #[test]
    fn distance_and_bearing_reference_values() {
        // one degree of latitude along a meridian
        let d = great_circle_km((0.0, 0.0), (1.0, 0.0));
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::PI / 180.0).abs() < 1e-9);
        assert!((initial_bearing_deg((0.0, 0.0), (1.0, 0.0)) - 0.0).abs() < 1e-12);
        assert!((initial_bearing_deg((0.0, 0.0), (0.0, 1.0)) - 90.0).abs() < 1e-12);
        assert!((initial_bearing_deg((0.0, 0.0), (-1.0, 0.0)) - 180.0).abs() < 1e-12);
        assert!((initial_bearing_deg((0.0, 0.0), (0.0, -1.0)) - 270.0).abs() < 1e-12);
    }
}
