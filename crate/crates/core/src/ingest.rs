//! Loading, validation, scaling and synthesis of neighborhood factor tables,
//! plus readers for the facility and wind-rose inputs.
//!
//! Missing cells are kept as `None` and never imputed. Rows without a
//! response are dropped by the analyses, and a row missing one factor is
//! only excluded from fits that use that factor.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::plume::{FacilityRecord, WindRose, WindSector};
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FactorGroup {
    Disease,
    BuiltEnv,
    NaturalEnv,
    #[default]
    NonEnv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorColumn {
    pub name: String,
    pub description: String,
    pub group: FactorGroup,
    pub values: Vec<Option<f64>>,
}

/// Per-neighborhood response plus factor matrix. Immutable once built;
/// transformations return new tables.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTable {
    ids: Vec<String>,
    names: Vec<String>,
    centroids: Vec<(f64, f64)>,
    response_name: String,
    response: Vec<Option<f64>>,
    factors: Vec<FactorColumn>,
}

impl FactorTable {
    /// Builds a table and checks its invariants.
    pub fn new(
        ids: Vec<String>,
        names: Vec<String>,
        centroids: Vec<(f64, f64)>,
        response_name: impl Into<String>,
        response: Vec<Option<f64>>,
        factors: Vec<FactorColumn>,
    ) -> Result<Self> {
        let n = ids.len();
        if names.len() != n || centroids.len() != n || response.len() != n {
            return Err(Error::Validation("row-aligned vectors differ in length".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (i, r) in response.iter().enumerate() {
            if let Some(v) = r {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::Validation(format!(
                        "response for '{}' must be finite and non-negative, got {v}",
                        ids[i]
                    )));
                }
            }
        }
        let mut names_seen = HashSet::new();
        for f in &factors {
            if f.values.len() != n {
                return Err(Error::Validation(format!("factor '{}' has wrong length", f.name)));
            }
            if f.description.trim().is_empty() {
                return Err(Error::Validation(format!("factor '{}' lacks a description", f.name)));
            }
            if !names_seen.insert(f.name.as_str()) {
                return Err(Error::Validation(format!("factor '{}' declared twice", f.name)));
            }
            if f.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("factor '{}' has non-finite values", f.name)));
            }
        }
        Ok(Self {
            ids,
            names,
            centroids,
            response_name: response_name.into(),
            response,
            factors,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn centroids(&self) -> &[(f64, f64)] {
        &self.centroids
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn response(&self) -> &[Option<f64>] {
        &self.response
    }

    pub fn factors(&self) -> &[FactorColumn] {
        &self.factors
    }

    pub fn factor_names(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.name.clone()).collect()
    }

    pub fn factor(&self, name: &str) -> Option<&FactorColumn> {
        self.factors.iter().find(|f| f.name == name)
    }

    /// `mask[row][col]` is true when the factor cell is missing.
    pub fn missing_mask(&self) -> Vec<Vec<bool>> {
        (0..self.n_rows())
            .map(|i| self.factors.iter().map(|f| f.values[i].is_none()).collect())
            .collect()
    }

    /// Rows with a response present.
    pub fn usable_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.response[i].is_some()).collect()
    }

    /// Rows with a response and every named factor present.
    pub fn complete_rows(&self, columns: &[&str]) -> Result<Vec<usize>> {
        let cols = columns
            .iter()
            .map(|c| self.factor(c).ok_or_else(|| Error::MissingColumn((*c).to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.n_rows())
            .filter(|&i| self.response[i].is_some() && cols.iter().all(|c| c.values[i].is_some()))
            .collect())
    }

    /// New table restricted to the given rows, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> FactorTable {
        FactorTable {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            names: rows.iter().map(|&i| self.names[i].clone()).collect(),
            centroids: rows.iter().map(|&i| self.centroids[i]).collect(),
            response_name: self.response_name.clone(),
            response: rows.iter().map(|&i| self.response[i]).collect(),
            factors: self
                .factors
                .iter()
                .map(|f| FactorColumn {
                    values: rows.iter().map(|&i| f.values[i]).collect(),
                    ..f.clone()
                })
                .collect(),
        }
    }

    /// New table with `column` appended, or replacing a same-named column.
    pub fn with_factor(&self, column: FactorColumn) -> Result<FactorTable> {
        let mut factors = self.factors.clone();
        match factors.iter_mut().find(|f| f.name == column.name) {
            Some(slot) => *slot = column,
            None => factors.push(column),
        }
        FactorTable::new(
            self.ids.clone(),
            self.names.clone(),
            self.centroids.clone(),
            self.response_name.clone(),
            self.response.clone(),
            factors,
        )
    }

    /// New table with the response replaced.
    pub fn with_response(&self, response: Vec<Option<f64>>) -> Result<FactorTable> {
        FactorTable::new(
            self.ids.clone(),
            self.names.clone(),
            self.centroids.clone(),
            self.response_name.clone(),
            response,
            self.factors.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDecl {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub group: FactorGroup,
}

/// Column configuration for `neighborhoods.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSchema {
    pub id_column: String,
    pub name_column: String,
    pub lat_column: String,
    pub lon_column: String,
    pub response_column: String,
    /// Declared factors. When empty, every remaining column is a factor
    /// described by its header text.
    pub factors: Vec<FactorDecl>,
}

impl Default for TableSchema {
    fn default() -> Self {
        Self {
            id_column: "neighborhood_id".into(),
            name_column: "name".into(),
            lat_column: "lat".into(),
            lon_column: "lon".into(),
            response_column: "response".into(),
            factors: Vec::new(),
        }
    }
}

fn parse_cell(raw: &str, line: usize, column: &str) -> Result<Option<f64>> {
    let t = raw.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Parse {
            row: line,
            column: column.to_string(),
            message: format!("'{t}': {e}"),
        })
        .and_then(|v| match v {
            Some(x) if !x.is_finite() => Err(Error::Parse {
                row: line,
                column: column.to_string(),
                message: format!("non-finite value '{t}'"),
            }),
            other => Ok(other),
        })
}

fn csv_error(err: csv::Error) -> Error {
    let row = err.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        row,
        column: String::new(),
        message: err.to_string(),
    }
}

/// Reads a neighborhood table. Rows are numbered by file line in errors.
pub fn load_factor_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<FactorTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_factor_table(&bytes, schema)
}

pub fn parse_factor_table(bytes: &[u8], schema: &TableSchema) -> Result<FactorTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Parse {
            row: 1,
            column: String::new(),
            message: "empty file".into(),
        });
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find(&schema.id_column)?;
    let name_col = find(&schema.name_column)?;
    let lat_col = find(&schema.lat_column)?;
    let lon_col = find(&schema.lon_column)?;
    let resp_col = find(&schema.response_column)?;
    let reserved = [id_col, name_col, lat_col, lon_col, resp_col];

    let decls: Vec<(usize, FactorDecl)> = if schema.factors.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !reserved.contains(i))
            .map(|(i, h)| {
                (
                    i,
                    FactorDecl {
                        name: h.trim().to_string(),
                        description: None,
                        group: FactorGroup::default(),
                    },
                )
            })
            .collect()
    } else {
        schema
            .factors
            .iter()
            .map(|d| Ok((find(&d.name)?, d.clone())))
            .collect::<Result<_>>()?
    };

    let mut ids = Vec::new();
    let mut names = Vec::new();
    let mut centroids = Vec::new();
    let mut response = Vec::new();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); decls.len()];
    let mut seen = HashSet::new();

    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record[id_col].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row: line,
                column: schema.id_column.clone(),
                message: "empty neighborhood id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let lat = parse_cell(&record[lat_col], line, &schema.lat_column)?.ok_or_else(|| {
            Error::Parse {
                row: line,
                column: schema.lat_column.clone(),
                message: "missing latitude".into(),
            }
        })?;
        let lon = parse_cell(&record[lon_col], line, &schema.lon_column)?.ok_or_else(|| {
            Error::Parse {
                row: line,
                column: schema.lon_column.clone(),
                message: "missing longitude".into(),
            }
        })?;
        let resp = parse_cell(&record[resp_col], line, &schema.response_column)?;
        if let Some(r) = resp {
            if r < 0.0 {
                return Err(Error::Parse {
                    row: line,
                    column: schema.response_column.clone(),
                    message: format!("negative response {r}"),
                });
            }
        }
        for (slot, (col, decl)) in columns.iter_mut().zip(&decls) {
            slot.push(parse_cell(&record[*col], line, &decl.name)?);
        }
        ids.push(id);
        names.push(record[name_col].to_string());
        centroids.push((lat, lon));
        response.push(resp);
    }
    if ids.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: String::new(),
            message: "no data rows".into(),
        });
    }

    let factors = decls
        .into_iter()
        .zip(columns)
        .map(|((_, d), values)| FactorColumn {
            description: d.description.clone().unwrap_or_else(|| d.name.clone()),
            name: d.name,
            group: d.group,
            values,
        })
        .collect();
    FactorTable::new(ids, names, centroids, schema.response_column.clone(), response, factors)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the table in the `neighborhoods.csv` layout. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_factor_table(table: &FactorTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = factor_table_to_csv(table)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn factor_table_to_csv(table: &FactorTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "neighborhood_id".to_string(),
        "name".into(),
        "lat".into(),
        "lon".into(),
        table.response_name.clone(),
    ];
    header.extend(table.factor_names());
    w.write_record(&header)?;
    for i in 0..table.n_rows() {
        let mut row = vec![
            table.ids[i].clone(),
            table.names[i].clone(),
            table.centroids[i].0.to_string(),
            table.centroids[i].1.to_string(),
            fmt_cell(table.response[i]),
        ];
        row.extend(table.factors.iter().map(|f| fmt_cell(f.values[i])));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
}

/// Variation report for one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMeta {
    pub name: String,
    pub group: FactorGroup,
    pub unique_value_count: usize,
    pub variation_sufficient: bool,
}

fn distinct_count(values: impl Iterator<Item = f64>) -> usize {
    // -0.0 and 0.0 count as one value
    values
        .map(|v| if v == 0.0 { 0u64 } else { v.to_bits() })
        .collect::<HashSet<_>>()
        .len()
}

/// Counts distinct values per factor over rows that have a response.
/// A factor is sufficient when it has at least `k` distinct values.
pub fn validate_variation(table: &FactorTable, k: usize) -> Result<Vec<FactorMeta>> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!("basis dimension must be >= 3, got {k}")));
    }
    let rows = table.usable_rows();
    Ok(table
        .factors
        .iter()
        .map(|f| {
            let count = distinct_count(rows.iter().filter_map(|&i| f.values[i]));
            FactorMeta {
                name: f.name.clone(),
                group: f.group,
                unique_value_count: count,
                variation_sufficient: count >= k,
            }
        })
        .collect())
}

/// Stored location and scale of a standardized column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScaling {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Z-scores the named columns (sample sd) over their non-missing cells.
pub fn standardize(table: &FactorTable, columns: &[&str]) -> Result<(FactorTable, Vec<ColumnScaling>)> {
    let mut out = table.clone();
    let mut scalings = Vec::with_capacity(columns.len());
    for &name in columns {
        let col = out
            .factors
            .iter_mut()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        let present: Vec<f64> = col.values.iter().flatten().copied().collect();
        let mean = stats::mean(&present);
        let sd = stats::sample_sd(&present);
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        let s = ColumnScaling { mean, sd };
        for v in col.values.iter_mut().flatten() {
            *v = s.apply(*v);
        }
        scalings.push(s);
    }
    Ok((out, scalings))
}

/// Smooth effect of one factor on the synthetic response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothFn {
    Zero,
    Linear { slope: f64 },
    Quadratic { coef: f64, center: f64 },
    Sine { amplitude: f64, period: f64 },
}

impl SmoothFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SmoothFn::Zero => 0.0,
            SmoothFn::Linear { slope } => slope * x,
            SmoothFn::Quadratic { coef, center } => coef * (x - center) * (x - center),
            SmoothFn::Sine { amplitude, period } => {
                amplitude * (2.0 * std::f64::consts::PI * x / period).sin()
            }
        }
    }

    pub fn is_signal(&self) -> bool {
        !matches!(self, SmoothFn::Zero)
    }
}

fn default_intercept() -> f64 {
    50.0
}

/// Description of a synthetic neighborhood population with planted classes
/// and planted smooth response effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_neighborhoods: usize,
    pub n_factors: usize,
    pub n_classes: usize,
    pub class_proportions: Vec<f64>,
    /// `class_means[c][j]`: mean of factor `j` in class `c`.
    pub class_means: Vec<Vec<f64>>,
    /// `class_sds[c][j]`: within-class standard deviation.
    pub class_sds: Vec<Vec<f64>>,
    pub smooth_functions: Vec<SmoothFn>,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "default_intercept")]
    pub response_intercept: f64,
    #[serde(default)]
    pub class_response_offsets: Vec<f64>,
    #[serde(default)]
    pub factor_names: Vec<String>,
    /// Largest-remainder class sizes instead of a multinomial draw.
    #[serde(default)]
    pub exact_class_sizes: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_classes < 1 {
            return bad("n_classes must be >= 1".into());
        }
        if self.n_neighborhoods < 1 {
            return bad("n_neighborhoods must be >= 1".into());
        }
        if self.class_proportions.len() != self.n_classes {
            return bad("class_proportions length must equal n_classes".into());
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return bad(format!("class_proportions must be a simplex (sum = {sum})"));
        }
        if self.class_means.len() != self.n_classes || self.class_sds.len() != self.n_classes {
            return bad("class_means and class_sds need one row per class".into());
        }
        if self
            .class_means
            .iter()
            .chain(&self.class_sds)
            .any(|r| r.len() != self.n_factors)
        {
            return bad("class_means and class_sds rows need one entry per factor".into());
        }
        if self.class_sds.iter().flatten().any(|s| !(*s >= 0.0)) {
            return bad("class_sds must be non-negative".into());
        }
        if self.smooth_functions.len() != self.n_factors {
            return bad("smooth_functions needs one entry per factor".into());
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be finite and >= 0".into());
        }
        if !self.class_response_offsets.is_empty() && self.class_response_offsets.len() != self.n_classes {
            return bad("class_response_offsets needs one entry per class".into());
        }
        if !self.factor_names.is_empty() && self.factor_names.len() != self.n_factors {
            return bad("factor_names needs one entry per factor".into());
        }
        Ok(())
    }

    pub fn factor_name(&self, j: usize) -> String {
        self.factor_names.get(j).cloned().unwrap_or_else(|| format!("x{:02}", j + 1))
    }
}

/// Table plus the ground truth used to build it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub table: FactorTable,
    pub labels: Vec<usize>,
    pub functions: Vec<SmoothFn>,
}

fn largest_remainder(n: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[c] += 1;
        rest -= 1;
    }
    counts
}

/// Draws a synthetic table. Same spec, same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stats::seeded_rng(spec.seed);
    let n = spec.n_neighborhoods;

    let labels: Vec<usize> = if spec.exact_class_sizes {
        let counts = largest_remainder(n, &spec.class_proportions);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
            .collect();
        // Fisher-Yates so classes are interleaved in row order
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        labels
    } else {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = spec.n_classes - 1;
                for (c, p) in spec.class_proportions.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                chosen
            })
            .collect()
    };

    let mut values = vec![vec![0.0; n]; spec.n_factors];
    let mut centroids = Vec::with_capacity(n);
    let mut response = Vec::with_capacity(n);
    for (i, &c) in labels.iter().enumerate() {
        let lat = 43.58 + 0.27 * rng.random::<f64>();
        let lon = -79.64 + 0.52 * rng.random::<f64>();
        centroids.push((lat, lon));
        let mut y = spec.response_intercept + spec.class_response_offsets.get(c).copied().unwrap_or(0.0);
        for j in 0..spec.n_factors {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = spec.class_means[c][j] + spec.class_sds[c][j] * z;
            values[j][i] = x;
            y += spec.smooth_functions[j].eval(x);
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        y += spec.noise_sd * e;
        response.push(Some(y.max(0.0)));
    }

    let width = n.to_string().len().max(3);
    let ids = (0..n).map(|i| format!("N{:0width$}", i + 1)).collect();
    let names = (0..n).map(|i| format!("Synthetic {}", i + 1)).collect();
    let factors = values
        .into_iter()
        .enumerate()
        .map(|(j, vals)| FactorColumn {
            name: spec.factor_name(j),
            description: format!("synthetic factor {}", j + 1),
            group: FactorGroup::NonEnv,
            values: vals.into_iter().map(Some).collect(),
        })
        .collect();
    let table = FactorTable::new(ids, names, centroids, "response", response, factors)?;
    Ok(SyntheticData {
        table,
        labels,
        functions: spec.smooth_functions.clone(),
    })
}

pub fn load_synthetic_spec(path: impl AsRef<Path>) -> Result<SyntheticSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Deserialize)]
struct FacilityRow {
    facility_id: String,
    lat: f64,
    lon: f64,
    year: i32,
    #[allow(dead_code)]
    pollutant: String,
    tep_value: f64,
}

/// Reads `facilities.csv` and pools all rows of a facility (every year and
/// pollutant) into one record.
pub fn load_facilities(path: impl AsRef<Path>) -> Result<Vec<FacilityRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_facilities(&bytes)
}

pub fn parse_facilities(bytes: &[u8]) -> Result<Vec<FacilityRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let mut pooled: BTreeMap<String, FacilityRecord> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for row in reader.deserialize::<FacilityRow>() {
        let row = row.map_err(csv_error)?;
        if !(row.tep_value >= 0.0) || !row.tep_value.is_finite() {
            return Err(Error::Validation(format!(
                "facility '{}' has invalid TEP value {}",
                row.facility_id, row.tep_value
            )));
        }
        match pooled.get_mut(&row.facility_id) {
            Some(rec) => {
                if (rec.lat - row.lat).abs() > 1e-9 || (rec.lon - row.lon).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "facility '{}' has inconsistent coordinates",
                        row.facility_id
                    )));
                }
                if !rec.years.contains(&row.year) {
                    rec.years.push(row.year);
                }
                rec.tep_values.push(row.tep_value);
            }
            None => {
                order.push(row.facility_id.clone());
                pooled.insert(
                    row.facility_id.clone(),
                    FacilityRecord {
                        facility_id: row.facility_id,
                        lat: row.lat,
                        lon: row.lon,
                        years: vec![row.year],
                        tep_values: vec![row.tep_value],
                    },
                );
            }
        }
    }
    Ok(order.into_iter().filter_map(|id| pooled.remove(&id)).collect())
}

/// Reads `windrose.csv` and validates coverage and normalization.
pub fn load_windrose(path: impl AsRef<Path>) -> Result<WindRose> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_windrose(&bytes)
}

pub fn parse_windrose(bytes: &[u8]) -> Result<WindRose> {
    #[derive(Deserialize)]
    struct Row {
        sector_start_deg: f64,
        sector_end_deg: f64,
        frequency: f64,
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let sectors = reader
        .deserialize::<Row>()
        .map(|r| {
            r.map_err(csv_error).map(|r| WindSector {
                start_deg: r.sector_start_deg,
                end_deg: r.sector_end_deg,
                frequency: r.frequency,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WindRose::new(sectors)
}
