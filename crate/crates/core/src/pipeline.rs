//! Config-driven orchestration: ingest → pollution → scan → cluster → fit →
//! select. Each stage reads the files of the stages before it from the
//! output directory and writes its own artifacts there once it has
//! finished computing, so a failed stage leaves nothing behind.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, ClassProfile, CovarianceFamily};
use crate::dimred;
use crate::gam::{self, GamConfig, GamSummary, LambdaPolicy, SmoothTerm};
use crate::ingest::{self, FactorColumn, FactorDecl, FactorGroup, FactorMeta, FactorTable, TableSchema};
use crate::plume::{self, PlumeParams, SigmaTuning};
use crate::select::{self, ExclusivityGroup, SelectConfig, SelectionMode, SelectionResult};
use crate::stats;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const INGESTED_CSV: &str = "ingested.csv";
pub const INGEST_JSON: &str = "ingest.json";
pub const RISK_CSV: &str = "pollution_risk.csv";
pub const SIGMA_JSON: &str = "pollution_sigma.json";
pub const SCAN_JSON: &str = "scan.json";
pub const PCA_CSV: &str = "pca_scores.csv";
pub const CLUSTERS_CSV: &str = "clusters.csv";
pub const BIC_CSV: &str = "bic_table.csv";
pub const PROFILES_JSON: &str = "profiles.json";
pub const GAMFIT_JSON: &str = "gamfit.json";
pub const CURVES_DIR: &str = "curves";
pub const SELECTION_JSON: &str = "selection.json";
pub const REPORT_JSON: &str = "report.json";

const CLUSTER_STREAM: u64 = 0xC1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Pollution,
    Scan,
    Cluster,
    Fit,
    Select,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Pollution => "pollution",
            Stage::Scan => "scan",
            Stage::Cluster => "cluster",
            Stage::Fit => "fit",
            Stage::Select => "select",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Ingest => 10,
            Stage::Pollution => 20,
            Stage::Scan => 30,
            Stage::Cluster => 40,
            Stage::Fit => 50,
            Stage::Select => 60,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    #[serde(default)]
    pub neighborhoods: Option<PathBuf>,
    /// Synthetic spec used instead of a neighborhoods file.
    #[serde(default)]
    pub synthetic: Option<PathBuf>,
    #[serde(default)]
    pub facilities: Option<PathBuf>,
    #[serde(default)]
    pub windrose: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnNames {
    pub id: String,
    pub name: String,
    pub lat: String,
    pub lon: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        let s = TableSchema::default();
        Self {
            id: s.id_column,
            name: s.name_column,
            lat: s.lat_column,
            lon: s.lon_column,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlumeConfig {
    pub mu_km: f64,
    pub sigma_km: f64,
    pub epsilon: f64,
    /// When non-empty, sigma is tuned over these values.
    pub sigma_candidates: Vec<f64>,
    /// Name of the risk factor added to the analysis table.
    pub factor_name: String,
}

impl Default for PlumeConfig {
    fn default() -> Self {
        let p = PlumeParams::default();
        Self {
            mu_km: p.mu_km,
            sigma_km: p.sigma_km,
            epsilon: p.epsilon,
            sigma_candidates: Vec::new(),
            factor_name: "industrial_pollution".into(),
        }
    }
}

impl PlumeConfig {
    fn params(&self) -> PlumeParams {
        PlumeParams {
            mu_km: self.mu_km,
            sigma_km: self.sigma_km,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Clustering features; defaults to the candidate factors.
    pub features: Option<Vec<String>>,
    pub n_components: usize,
    pub k_values: Vec<usize>,
    pub families: Vec<CovarianceFamily>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            features: None,
            n_components: 2,
            k_values: (1..=6).collect(),
            families: CovarianceFamily::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub factors: Vec<String>,
    pub curve_points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            factors: Vec::new(),
            curve_points: 100,
        }
    }
}

/// One JSON file describing a whole run. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub inputs: InputPaths,
    #[serde(default)]
    pub response_column: Option<String>,
    #[serde(default)]
    pub columns: ColumnNames,
    /// Declared factor columns with descriptions and groups. When empty,
    /// every non-key column of the neighborhoods file is a factor.
    #[serde(default)]
    pub factors: Vec<FactorDecl>,
    /// Factors entering scan and selection; defaults to all
    /// variation-sufficient factors.
    #[serde(default)]
    pub candidate_factors: Option<Vec<String>>,
    #[serde(default)]
    pub exclusivity_groups: Vec<ExclusivityGroup>,
    #[serde(default)]
    pub plume: PlumeConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub gam: GamConfig,
    #[serde(default)]
    pub selection: SelectConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn schema(&self, response: &str) -> TableSchema {
        TableSchema {
            id_column: self.columns.id.clone(),
            name_column: self.columns.name.clone(),
            lat_column: self.columns.lat.clone(),
            lon_column: self.columns.lon.clone(),
            response_column: response.to_string(),
            factors: self.factors.clone(),
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    RunConfig::from_json(&text, base)
}

/// A config with its seed and output directory settled.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// SHA-256 of the effective config serialized as JSON.
    pub config_hash: String,
}

impl RunContext {
    /// `seed` and `out_dir` override the values in the config.
    pub fn new(mut config: RunConfig, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<Self> {
        let seed = seed
            .or(config.seed)
            .ok_or_else(|| Error::Validation("a seed is required: set \"seed\" in the config or pass --seed".into()))?;
        config.seed = Some(seed);
        let out_dir = match out_dir {
            Some(p) => p,
            None => config
                .out_dir
                .as_deref()
                .map(|p| config.resolve(p))
                .ok_or_else(|| Error::Validation("no output directory: set \"out_dir\" or pass --out".into()))?,
        };
        select::validate_groups(&config.exclusivity_groups)?;
        let config_hash = hex(&Sha256::digest(serde_json::to_vec(&config)?));
        Ok(Self {
            config,
            seed,
            out_dir,
            config_hash,
        })
    }

    /// Stages `run_pipeline` executes, in order.
    pub fn planned_stages(&self) -> Vec<Stage> {
        let mut v = vec![Stage::Ingest];
        if self.config.inputs.facilities.is_some() {
            v.push(Stage::Pollution);
        }
        v.extend([Stage::Scan, Stage::Cluster]);
        if !self.config.fit.factors.is_empty() {
            v.push(Stage::Fit);
        }
        v.push(Stage::Select);
        v
    }

    fn artifact(&self, file: &str, producer: Stage) -> Result<Vec<u8>> {
        let path = self.out_dir.join(file);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                file: path.display().to_string(),
                producer: producer.as_str().into(),
            });
        }
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    }

    fn json_artifact<T: for<'de> Deserialize<'de>>(&self, file: &str, producer: Stage) -> Result<T> {
        Ok(serde_json::from_slice(&self.artifact(file, producer)?)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

type Files = Vec<(String, Vec<u8>)>;

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes all files of one stage; on failure removes the ones already
/// written.
fn commit(out_dir: &Path, files: Files) -> Result<Vec<PathBuf>> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        for (name, bytes) in &files {
            let path = out_dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            remove_files(out_dir, &written);
            Err(e)
        }
    }
}

fn remove_files(out_dir: &Path, paths: &[PathBuf]) {
    for p in paths {
        let _ = std::fs::remove_file(p);
        if let Some(parent) = p.parent().filter(|d| *d != out_dir) {
            // only succeeds when the directory is empty
            let _ = std::fs::remove_dir(parent);
        }
    }
}

/// Runs one stage against the files already in the output directory.
pub fn run_stage(ctx: &RunContext, stage: Stage) -> std::result::Result<Vec<PathBuf>, StageError> {
    let wrap = |source| StageError { stage, source };
    let files = match stage {
        Stage::Config => Ok(Vec::new()),
        Stage::Ingest => stage_ingest(ctx),
        Stage::Pollution => stage_pollution(ctx),
        Stage::Scan => stage_scan(ctx),
        Stage::Cluster => stage_cluster(ctx),
        Stage::Fit => stage_fit(ctx),
        Stage::Select => stage_select(ctx),
    }
    .map_err(wrap)?;
    commit(&ctx.out_dir, files).map_err(wrap)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub stages: Vec<Stage>,
}

/// Every planned stage in order. On failure all files written by this run
/// are removed, along with the output directory if the run created it.
pub fn run_pipeline(ctx: &RunContext) -> std::result::Result<RunSummary, StageError> {
    let created = !ctx.out_dir.exists();
    let stages = ctx.planned_stages();
    let mut files = Vec::new();
    for &stage in &stages {
        match run_stage(ctx, stage) {
            Ok(w) => files.extend(w),
            Err(e) => {
                remove_files(&ctx.out_dir, &files);
                if created {
                    let _ = std::fs::remove_dir(&ctx.out_dir);
                }
                return Err(e);
            }
        }
    }
    Ok(RunSummary {
        out_dir: ctx.out_dir.clone(),
        files,
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorInfo {
    pub name: String,
    pub description: String,
    pub group: FactorGroup,
    pub unique_value_count: usize,
    pub variation_sufficient: bool,
}

/// Contents of `ingest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub response_column: String,
    pub n_rows: usize,
    pub n_usable_rows: usize,
    pub basis_dimension: usize,
    pub factors: Vec<FactorInfo>,
}

fn stage_ingest(ctx: &RunContext) -> Result<Files> {
    let cfg = &ctx.config;
    let response = cfg
        .response_column
        .as_deref()
        .ok_or_else(|| Error::Validation("config does not name a response column (\"response_column\")".into()))?;
    let table = match (&cfg.inputs.neighborhoods, &cfg.inputs.synthetic) {
        (Some(p), None) => ingest::load_factor_table(cfg.resolve(p), &cfg.schema(response))?,
        (None, Some(p)) => {
            let spec = ingest::load_synthetic_spec(cfg.resolve(p))?;
            let table = ingest::generate_synthetic(&spec)?.table;
            if table.response_name() != response {
                return Err(Error::MissingColumn(response.to_string()));
            }
            table
        }
        _ => {
            return Err(Error::Validation(
                "exactly one of inputs.neighborhoods and inputs.synthetic must be set".into(),
            ))
        }
    };
    let variation = ingest::validate_variation(&table, cfg.gam.k)?;
    let report = IngestReport {
        response_column: response.to_string(),
        n_rows: table.n_rows(),
        n_usable_rows: table.usable_rows().len(),
        basis_dimension: cfg.gam.k,
        factors: table
            .factors()
            .iter()
            .zip(&variation)
            .map(|(f, v)| FactorInfo {
                name: f.name.clone(),
                description: f.description.clone(),
                group: f.group,
                unique_value_count: v.unique_value_count,
                variation_sufficient: v.variation_sufficient,
            })
            .collect(),
    };
    Ok(vec![
        (INGESTED_CSV.into(), ingest::factor_table_to_csv(&table)?),
        (INGEST_JSON.into(), json_bytes(&report)?),
    ])
}

fn load_ingested(ctx: &RunContext) -> Result<(FactorTable, IngestReport)> {
    let report: IngestReport = ctx.json_artifact(INGEST_JSON, Stage::Ingest)?;
    let bytes = ctx.artifact(INGESTED_CSV, Stage::Ingest)?;
    let schema = TableSchema {
        response_column: report.response_column.clone(),
        factors: report
            .factors
            .iter()
            .map(|f| FactorDecl {
                name: f.name.clone(),
                description: Some(f.description.clone()),
                group: f.group,
            })
            .collect(),
        ..TableSchema::default()
    };
    Ok((ingest::parse_factor_table(&bytes, &schema)?, report))
}

/// Ingested table plus the pollution factor when facilities are configured.
pub fn analysis_table(ctx: &RunContext) -> Result<FactorTable> {
    let (table, _) = load_ingested(ctx)?;
    if ctx.config.inputs.facilities.is_none() {
        return Ok(table);
    }
    let path = ctx.out_dir.join(RISK_CSV);
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            file: path.display().to_string(),
            producer: Stage::Pollution.as_str().into(),
        });
    }
    let risk: HashMap<String, f64> = plume::read_risk_csv(&path)?
        .into_iter()
        .map(|r| (r.neighborhood_id, r.value))
        .collect();
    table.with_factor(FactorColumn {
        name: ctx.config.plume.factor_name.clone(),
        description: "industrial pollution risk (log scale)".into(),
        group: FactorGroup::BuiltEnv,
        values: table.ids().iter().map(|id| risk.get(id).copied()).collect(),
    })
}

fn candidate_factors(ctx: &RunContext, table: &FactorTable) -> Result<(Vec<FactorMeta>, Vec<String>)> {
    let variation = ingest::validate_variation(table, ctx.config.gam.k)?;
    let candidates = match &ctx.config.candidate_factors {
        Some(list) => {
            if let Some(bad) = list.iter().find(|f| table.factor(f).is_none()) {
                return Err(Error::MissingColumn(bad.clone()));
            }
            list.clone()
        }
        None => variation
            .iter()
            .filter(|m| m.variation_sufficient)
            .map(|m| m.name.clone())
            .collect(),
    };
    Ok((variation, candidates))
}

fn stage_pollution(ctx: &RunContext) -> Result<Files> {
    let cfg = &ctx.config;
    let fpath = cfg
        .inputs
        .facilities
        .as_deref()
        .ok_or_else(|| Error::Validation("no facilities input configured (inputs.facilities)".into()))?;
    let (table, _) = load_ingested(ctx)?;
    let facilities = ingest::load_facilities(cfg.resolve(fpath))?;
    let rose = cfg
        .inputs
        .windrose
        .as_deref()
        .map(|p| ingest::load_windrose(cfg.resolve(p)))
        .transpose()?;
    let mut params = cfg.plume.params();
    params.validate()?;
    let mut files = Vec::new();
    if !cfg.plume.sigma_candidates.is_empty() {
        let tuning = plume::tune_sigma(&facilities, &table, rose.as_ref(), &params, &cfg.plume.sigma_candidates)?;
        params.sigma_km = tuning.sigma_km;
        files.push((SIGMA_JSON.into(), json_bytes(&tuning)?));
    }
    let scores = plume::risk_scores(&facilities, &table, rose.as_ref(), &params)?;
    files.push((RISK_CSV.into(), plume::risk_to_csv(&scores)?));
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub factor: String,
    pub deviance_explained: Option<f64>,
    pub edf: Option<f64>,
    pub p_value: Option<f64>,
    pub lambda: Option<f64>,
    pub significant: bool,
    pub error: Option<String>,
}

/// Contents of `scan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub n_rows: usize,
    pub threshold: f64,
    pub variation: Vec<FactorMeta>,
    pub ranked: Vec<ScanEntry>,
}

fn stage_scan(ctx: &RunContext) -> Result<Files> {
    let table = analysis_table(ctx)?;
    let (variation, candidates) = candidate_factors(ctx, &table)?;
    if candidates.is_empty() {
        return Err(Error::Degenerate("no variation-sufficient factor to scan".into()));
    }
    let threshold = ctx.config.selection.threshold;
    let ranked = select::single_factor_scan(&table, &candidates, &ctx.config.gam, threshold)
        .into_iter()
        .map(|s| {
            let term = s.fit.as_ref().and_then(|f| f.terms.first());
            ScanEntry {
                factor: s.factors[0].clone(),
                deviance_explained: s.deviance_explained,
                edf: term.map(|t| t.edf),
                p_value: term.map(|t| t.p_value),
                lambda: term.map(|t| t.lambda),
                significant: s.all_significant,
                error: s.error,
            }
        })
        .collect();
    let report = ScanReport {
        n_rows: table.usable_rows().len(),
        threshold,
        variation,
        ranked,
    };
    Ok(vec![(SCAN_JSON.into(), json_bytes(&report)?)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMixture {
    pub k: usize,
    pub family: CovarianceFamily,
    pub bic: f64,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Contents of `profiles.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub features: Vec<String>,
    pub n_rows: usize,
    pub n_components: usize,
    pub eigenvalues: Vec<f64>,
    pub variance_explained: f64,
    pub loadings: Vec<Vec<f64>>,
    pub selected: SelectedMixture,
    pub classes: Vec<ClassProfile>,
}

fn stage_cluster(ctx: &RunContext) -> Result<Files> {
    let cfg = &ctx.config.cluster;
    let table = analysis_table(ctx)?;
    let features = match &cfg.features {
        Some(f) => f.clone(),
        None => candidate_factors(ctx, &table)?.1,
    };
    if features.is_empty() {
        return Err(Error::Degenerate("no clustering features".into()));
    }
    let refs: Vec<&str> = features.iter().map(String::as_str).collect();
    let rows = table.complete_rows(&refs)?;
    if rows.len() < 2 {
        return Err(Error::Degenerate(format!("{} complete rows, clustering needs at least 2", rows.len())));
    }
    let sub = table.subset_rows(&rows);
    let (scaled, _) = ingest::standardize(&sub, &refs)?;
    let cols: Vec<&FactorColumn> = refs.iter().map(|f| scaled.factor(f).expect("standardized column")).collect();
    let matrix = DMatrix::from_fn(rows.len(), cols.len(), |i, j| cols[j].values[i].expect("complete row"));
    let model = dimred::fit_pca(&matrix)?;
    let nc = cfg.n_components.min(model.n_components());
    let scores = dimred::project(&model, &matrix, nc)?;
    let ks: Vec<usize> = cfg.k_values.iter().copied().filter(|&k| k >= 1 && k <= rows.len()).collect();
    let seed = stats::derive_seed(ctx.seed, &[CLUSTER_STREAM]);
    let assignment = cluster::select_model(&scores, &ks, &cfg.families, seed)?;
    let response: Vec<f64> = sub.response().iter().map(|r| r.expect("complete row")).collect();
    let labels = cluster::relabel_by_response(&assignment.labels, &response);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let classes = cluster::class_profile(&labels, n_classes, &sub)?;

    let mut header = vec!["neighborhood_id".to_string()];
    header.extend((1..=nc).map(|c| format!("pc{c}")));
    let pca_rows: Vec<Vec<String>> = (0..rows.len())
        .map(|i| {
            let mut r = vec![sub.ids()[i].clone()];
            r.extend((0..nc).map(|c| scores[(i, c)].to_string()));
            r
        })
        .collect();
    let cluster_rows: Vec<Vec<String>> = (0..rows.len())
        .map(|i| vec![sub.ids()[i].clone(), cluster::class_name(labels[i])])
        .collect();
    let fit = &assignment.fit;
    let bic_rows: Vec<Vec<String>> = assignment
        .bic_table
        .iter()
        .map(|e| {
            let selected = e.k == fit.k && e.family == fit.family;
            vec![
                e.k.to_string(),
                e.family.to_string(),
                e.n_params.to_string(),
                fmt_opt(e.loglik),
                fmt_opt(e.bic),
                selected.to_string(),
                e.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let report = ClusterReport {
        features: features.clone(),
        n_rows: rows.len(),
        n_components: nc,
        eigenvalues: model.eigenvalues.clone(),
        variance_explained: dimred::variance_explained(&model, nc),
        loadings: model.components[..nc].to_vec(),
        selected: SelectedMixture {
            k: fit.k,
            family: fit.family,
            bic: assignment.bic,
            log_likelihood: fit.log_likelihood,
            n_params: fit.n_params,
            iterations: fit.iterations,
            converged: fit.converged,
        },
        classes,
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    Ok(vec![
        (PCA_CSV.into(), csv_bytes(&header, &pca_rows)?),
        (CLUSTERS_CSV.into(), csv_bytes(&s(&["neighborhood_id", "class"]), &cluster_rows)?),
        (
            BIC_CSV.into(),
            csv_bytes(
                &s(&["k", "family", "n_params", "log_likelihood", "bic", "selected", "error"]),
                &bic_rows,
            )?,
        ),
        (PROFILES_JSON.into(), json_bytes(&report)?),
    ])
}

/// Contents of `gamfit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub factors: Vec<String>,
    pub summary: GamSummary,
    pub deviance: f64,
    pub null_deviance: f64,
    pub terms: Vec<SmoothTerm>,
    /// Curve file per factor, relative to the output directory.
    pub curves: Vec<String>,
}

fn curve_file_name(factor: &str) -> String {
    let safe: String = factor
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{CURVES_DIR}/{safe}.csv")
}

fn stage_fit(ctx: &RunContext) -> Result<Files> {
    let fc = &ctx.config.fit;
    if fc.factors.is_empty() {
        return Err(Error::InvalidArgument("no factors to fit: set fit.factors or pass --factors".into()));
    }
    let table = analysis_table(ctx)?;
    let refs: Vec<&str> = fc.factors.iter().map(String::as_str).collect();
    let fit = gam::fit_gam(&table, &refs, &ctx.config.gam, &LambdaPolicy::Gcv)?;
    let mut files = Vec::new();
    let mut curves = Vec::new();
    for f in &fc.factors {
        let name = curve_file_name(f);
        if curves.contains(&name) {
            return Err(Error::InvalidArgument(format!("factor names collide in curve file '{name}'")));
        }
        let c = gam::smooth_curve(&fit, f, fc.curve_points)?;
        let rows: Vec<Vec<String>> = (0..c.x.len())
            .map(|i| vec![c.x[i].to_string(), c.fit[i].to_string(), c.lower[i].to_string(), c.upper[i].to_string()])
            .collect();
        let header: Vec<String> = ["x", "fit", "lower", "upper"].iter().map(|s| s.to_string()).collect();
        files.push((name.clone(), csv_bytes(&header, &rows)?));
        curves.push(name);
    }
    let report = FitReport {
        factors: fc.factors.clone(),
        summary: fit.summary(),
        deviance: fit.deviance,
        null_deviance: fit.null_deviance,
        terms: fit.terms.clone(),
        curves,
    };
    files.push((GAMFIT_JSON.into(), json_bytes(&report)?));
    Ok(files)
}

/// Contents of `selection.json` and `selection_class_<X>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub scope: String,
    pub n_rows: usize,
    pub threshold: f64,
    pub candidates: Vec<String>,
    /// Candidates left out for lack of distinct values within the scope.
    pub excluded: Vec<String>,
    #[serde(flatten)]
    pub result: SelectionResult,
}

pub fn selection_file_name(scope: &str) -> String {
    if scope == "all" {
        SELECTION_JSON.to_string()
    } else {
        format!("selection_class_{scope}.json")
    }
}

fn read_clusters(ctx: &RunContext) -> Result<HashMap<String, String>> {
    let bytes = ctx.artifact(CLUSTERS_CSV, Stage::Cluster)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Validation(format!("{CLUSTERS_CSV}: expected 2 columns, found {}", rec.len())));
        }
        out.insert(rec[0].to_string(), rec[1].to_string());
    }
    Ok(out)
}

fn select_scope(ctx: &RunContext, scope: &str, table: &FactorTable, candidates: &[String]) -> Result<SelectionReport> {
    let cfg = &ctx.config;
    let variation = ingest::validate_variation(table, cfg.gam.k)?;
    let sufficient = |f: &String| variation.iter().any(|m| &m.name == f && m.variation_sufficient);
    let (usable, excluded): (Vec<String>, Vec<String>) = candidates.iter().cloned().partition(sufficient);
    let n_rows = table.usable_rows().len();
    let single = n_rows < cfg.selection.min_multi_factor_rows;
    let result = if usable.is_empty() {
        SelectionResult {
            mode: if single { SelectionMode::SingleFactor } else { SelectionMode::MultiFactor },
            winner: None,
            ranked: Vec::new(),
            exhaustive: true,
            n_evaluated: 0,
        }
    } else if single {
        select::select_single_factor(table, &usable, &cfg.selection, &cfg.gam)
    } else {
        select::search_best_group(table, &usable, &cfg.exclusivity_groups, &cfg.selection, &cfg.gam)?
    };
    Ok(SelectionReport {
        scope: scope.to_string(),
        n_rows,
        threshold: cfg.selection.threshold,
        candidates: usable,
        excluded,
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSize {
    pub class: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub features: Vec<String>,
    pub variance_explained: f64,
    pub k: usize,
    pub family: CovarianceFamily,
    pub bic: f64,
    pub class_sizes: Vec<ClassSize>,
    pub profiles: Vec<ClassProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollutionSummary {
    pub factor: String,
    pub sigma_km: f64,
    pub tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub factors: Vec<String>,
    pub deviance_explained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeSummary {
    pub scope: String,
    pub file: String,
    pub n_rows: usize,
    pub mode: SelectionMode,
    pub exhaustive: bool,
    pub winner: Option<Vec<String>>,
    pub deviance_explained: Option<f64>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub library_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub response_column: String,
    pub n_rows: usize,
    pub n_usable_rows: usize,
    pub sufficient_factors: Vec<String>,
    pub insufficient_factors: Vec<String>,
    pub pollution: Option<PollutionSummary>,
    pub clustering: ClusteringSummary,
    pub fit: Option<FitSummary>,
    pub selections: Vec<ScopeSummary>,
}

fn stage_select(ctx: &RunContext) -> Result<Files> {
    let cfg = &ctx.config;
    let (_, ingest_report) = load_ingested(ctx)?;
    let table = analysis_table(ctx)?;
    let (variation, candidates) = candidate_factors(ctx, &table)?;
    let clusters = read_clusters(ctx)?;
    let profiles: ClusterReport = ctx.json_artifact(PROFILES_JSON, Stage::Cluster)?;

    let mut scopes: Vec<(String, FactorTable)> = vec![("all".into(), table.clone())];
    for p in &profiles.classes {
        let rows: Vec<usize> = (0..table.n_rows())
            .filter(|&i| clusters.get(&table.ids()[i]) == Some(&p.class_name))
            .collect();
        scopes.push((p.class_name.clone(), table.subset_rows(&rows)));
    }
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for (scope, t) in &scopes {
        let rep = select_scope(ctx, scope, t, &candidates)?;
        let file = selection_file_name(scope);
        summaries.push(ScopeSummary {
            scope: scope.clone(),
            file: file.clone(),
            n_rows: rep.n_rows,
            mode: rep.result.mode,
            exhaustive: rep.result.exhaustive,
            winner: rep.result.winner.as_ref().map(|w| w.factors.clone()),
            deviance_explained: rep.result.winner.as_ref().and_then(|w| w.deviance_explained),
        });
        files.push((file, json_bytes(&rep)?));
    }

    let pollution = match &cfg.inputs.facilities {
        None => None,
        Some(_) if !cfg.plume.sigma_candidates.is_empty() => {
            let t: SigmaTuning = ctx.json_artifact(SIGMA_JSON, Stage::Pollution)?;
            Some(PollutionSummary {
                factor: cfg.plume.factor_name.clone(),
                sigma_km: t.sigma_km,
                tuned: true,
            })
        }
        Some(_) => Some(PollutionSummary {
            factor: cfg.plume.factor_name.clone(),
            sigma_km: cfg.plume.sigma_km,
            tuned: false,
        }),
    };
    let fit = if cfg.fit.factors.is_empty() {
        None
    } else {
        let f: FitReport = ctx.json_artifact(GAMFIT_JSON, Stage::Fit)?;
        Some(FitSummary {
            factors: f.factors,
            deviance_explained: f.summary.deviance_explained,
        })
    };
    let report = Report {
        schema_version: SCHEMA_VERSION,
        library_version: LIBRARY_VERSION.to_string(),
        config_sha256: ctx.config_hash.clone(),
        seed: ctx.seed,
        response_column: ingest_report.response_column,
        n_rows: table.n_rows(),
        n_usable_rows: table.usable_rows().len(),
        sufficient_factors: variation.iter().filter(|m| m.variation_sufficient).map(|m| m.name.clone()).collect(),
        insufficient_factors: variation.iter().filter(|m| !m.variation_sufficient).map(|m| m.name.clone()).collect(),
        pollution,
        clustering: ClusteringSummary {
            features: profiles.features.clone(),
            variance_explained: profiles.variance_explained,
            k: profiles.selected.k,
            family: profiles.selected.family,
            bic: profiles.selected.bic,
            class_sizes: profiles
                .classes
                .iter()
                .map(|c| ClassSize {
                    class: c.class_name.clone(),
                    size: c.size,
                })
                .collect(),
            profiles: profiles.classes,
        },
        fit,
        selections: summaries,
    };
    files.push((REPORT_JSON.into(), json_bytes(&report)?));
    Ok(files)
}
