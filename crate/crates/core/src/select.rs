//! Factor-group selection: single-factor screening and a search over factor
//! subsets that respects exclusivity groups, keeps only subsets whose every
//! term passes the p-value threshold, and picks the one explaining the most
//! deviance.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::gam::{self, GamConfig, GamSummary, LambdaPolicy};
use crate::ingest::FactorTable;
use crate::{Error, Result};

/// Factors of which at most one may enter a candidate model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusivityGroup {
    pub name: String,
    pub members: Vec<String>,
}

pub fn validate_groups(groups: &[ExclusivityGroup]) -> Result<()> {
    let mut seen = HashSet::new();
    for g in groups {
        if g.members.len() < 2 {
            return Err(Error::Validation(format!("exclusivity group '{}' needs at least 2 members", g.name)));
        }
        for m in &g.members {
            if !seen.insert(m.as_str()) {
                return Err(Error::Validation(format!("factor '{m}' belongs to more than one exclusivity group")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub threshold: f64,
    pub max_size: usize,
    /// Largest candidate count searched exhaustively.
    pub budget: usize,
    /// Deviance gap under which candidates count as tied.
    pub tie_tolerance: f64,
    /// Classes smaller than this only get single-factor analysis.
    pub min_multi_factor_rows: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            threshold: 0.10,
            max_size: 6,
            budget: 5000,
            tie_tolerance: 1e-6,
            min_multi_factor_rows: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    SingleFactor,
    MultiFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub factors: Vec<String>,
    pub fit: Option<GamSummary>,
    pub all_significant: bool,
    pub deviance_explained: Option<f64>,
    pub error: Option<String>,
}

impl SubsetScore {
    fn evaluate(table: &FactorTable, factors: Vec<String>, gam_config: &GamConfig, threshold: f64) -> Self {
        let refs: Vec<&str> = factors.iter().map(String::as_str).collect();
        match gam::fit_gam(table, &refs, gam_config, &LambdaPolicy::Gcv) {
            Ok(fit) => {
                let summary = fit.summary();
                let all_significant = summary.terms.iter().all(|t| t.p_value <= threshold);
                SubsetScore {
                    factors,
                    deviance_explained: Some(summary.deviance_explained),
                    fit: Some(summary),
                    all_significant,
                    error: None,
                }
            }
            Err(e) => SubsetScore {
                factors,
                fit: None,
                all_significant: false,
                deviance_explained: None,
                error: Some(e.to_string()),
            },
        }
    }

    fn sorted_names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.factors.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    pub winner: Option<SubsetScore>,
    pub ranked: Vec<SubsetScore>,
    /// False when the greedy forward pass replaced full enumeration.
    pub exhaustive: bool,
    pub n_evaluated: usize,
}

/// Ordering used for candidate rankings: successful fits first, then
/// all-significant ones, then deviance explained (descending), subset size
/// and the sorted factor names.
pub fn ranking_order(a: &SubsetScore, b: &SubsetScore) -> std::cmp::Ordering {
    let da = a.deviance_explained.unwrap_or(f64::NEG_INFINITY);
    let db = b.deviance_explained.unwrap_or(f64::NEG_INFINITY);
    a.deviance_explained
        .is_none()
        .cmp(&b.deviance_explained.is_none())
        .then(b.all_significant.cmp(&a.all_significant))
        .then(db.total_cmp(&da))
        .then(a.factors.len().cmp(&b.factors.len()))
        .then_with(|| a.sorted_names().cmp(&b.sorted_names()))
}

/// Among all-significant candidates: the largest deviance explained, where
/// values within `tie` of the maximum are tied and go to the smaller
/// subset, then the lexicographically first sorted name list.
pub fn pick_winner(candidates: &[SubsetScore], tie: f64) -> Option<usize> {
    let top = candidates
        .iter()
        .filter(|c| c.all_significant)
        .filter_map(|c| c.deviance_explained)
        .fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return None;
    }
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.all_significant && c.deviance_explained.is_some_and(|d| d >= top - tie))
        .min_by(|(_, a), (_, b)| {
            a.factors
                .len()
                .cmp(&b.factors.len())
                .then_with(|| a.sorted_names().cmp(&b.sorted_names()))
        })
        .map(|(i, _)| i)
}

fn evaluate_all(table: &FactorTable, subsets: Vec<Vec<String>>, gam_config: &GamConfig, threshold: f64) -> Vec<SubsetScore> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        subsets
            .into_par_iter()
            .map(|s| SubsetScore::evaluate(table, s, gam_config, threshold))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        subsets
            .into_iter()
            .map(|s| SubsetScore::evaluate(table, s, gam_config, threshold))
            .collect()
    }
}

/// One univariate GAM per factor, ranked by deviance explained (failed
/// fits last).
pub fn single_factor_scan(
    table: &FactorTable,
    factors: &[String],
    gam_config: &GamConfig,
    threshold: f64,
) -> Vec<SubsetScore> {
    let mut scores = evaluate_all(table, factors.iter().map(|f| vec![f.clone()]).collect(), gam_config, threshold);
    scores.sort_by(|a, b| {
        let da = a.deviance_explained.unwrap_or(f64::NEG_INFINITY);
        let db = b.deviance_explained.unwrap_or(f64::NEG_INFINITY);
        a.deviance_explained
            .is_none()
            .cmp(&b.deviance_explained.is_none())
            .then(db.total_cmp(&da))
            .then_with(|| a.factors.cmp(&b.factors))
    });
    scores
}

fn group_of(groups: &[ExclusivityGroup]) -> HashMap<&str, usize> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| grp.members.iter().map(move |m| (m.as_str(), g)))
        .collect()
}

/// All non-empty subsets of at most `max_size` factors holding at most one
/// member of each group. Ordered by size, then by position in `factors`.
pub fn enumerate_subsets(factors: &[String], groups: &[ExclusivityGroup], max_size: usize) -> Vec<Vec<String>> {
    let gmap = group_of(groups);
    let n = factors.len();
    let mut out = Vec::new();
    for size in 1..=max_size.min(n) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let mut used = HashSet::new();
            let ok = idx
                .iter()
                .all(|&i| gmap.get(factors[i].as_str()).is_none_or(|g| used.insert(*g)));
            if ok {
                out.push(idx.iter().map(|&i| factors[i].clone()).collect());
            }
            // next combination in lexicographic index order
            let mut pos = size;
            while pos > 0 && idx[pos - 1] == n - size + pos - 1 {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            idx[pos - 1] += 1;
            for j in pos..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// Number of subsets `enumerate_subsets` would return, without building them.
pub fn count_subsets(factors: &[String], groups: &[ExclusivityGroup], max_size: usize) -> u128 {
    let gmap = group_of(groups);
    let mut units: Vec<u128> = Vec::new();
    let mut group_sizes: HashMap<usize, u128> = HashMap::new();
    for f in factors {
        match gmap.get(f.as_str()) {
            Some(&g) => *group_sizes.entry(g).or_default() += 1,
            None => units.push(1),
        }
    }
    let mut gs: Vec<_> = group_sizes.into_iter().collect();
    gs.sort();
    units.extend(gs.into_iter().map(|(_, c)| c));
    // coefficients of prod(1 + c_u t), truncated at max_size
    let mut poly = vec![0u128; max_size + 1];
    poly[0] = 1;
    for c in units {
        for d in (1..=max_size).rev() {
            poly[d] += poly[d - 1] * c;
        }
    }
    poly[1..].iter().sum()
}

fn conflicts(set: &[String], candidate: &str, gmap: &HashMap<&str, usize>) -> bool {
    match gmap.get(candidate) {
        None => false,
        Some(g) => set.iter().any(|s| gmap.get(s.as_str()) == Some(g)),
    }
}

/// Exhaustive search over exclusivity-respecting subsets, or a greedy
/// forward pass when the candidate count exceeds the budget.
pub fn search_best_group(
    table: &FactorTable,
    factors: &[String],
    groups: &[ExclusivityGroup],
    config: &SelectConfig,
    gam_config: &GamConfig,
) -> Result<SelectionResult> {
    validate_groups(groups)?;
    if factors.is_empty() || config.max_size == 0 {
        return Err(Error::InvalidArgument("no candidate factor groups".into()));
    }
    let total = count_subsets(factors, groups, config.max_size);
    if total <= config.budget as u128 {
        let candidates = enumerate_subsets(factors, groups, config.max_size);
        let mut scored = evaluate_all(table, candidates, gam_config, config.threshold);
        let n_evaluated = scored.len();
        scored.sort_by(ranking_order);
        let winner = pick_winner(&scored, config.tie_tolerance).map(|i| scored[i].clone());
        return Ok(SelectionResult {
            mode: SelectionMode::MultiFactor,
            winner,
            ranked: scored,
            exhaustive: true,
            n_evaluated,
        });
    }
    greedy_forward(table, factors, groups, config, gam_config)
}

fn greedy_forward(
    table: &FactorTable,
    factors: &[String],
    groups: &[ExclusivityGroup],
    config: &SelectConfig,
    gam_config: &GamConfig,
) -> Result<SelectionResult> {
    let gmap = group_of(groups);
    let mut current: Vec<String> = Vec::new();
    let mut current_dev = f64::NEG_INFINITY;
    let mut evaluated: Vec<SubsetScore> = Vec::new();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    while current.len() < config.max_size {
        let trials: Vec<Vec<String>> = factors
            .iter()
            .filter(|f| !current.contains(f) && !conflicts(&current, f, &gmap))
            .map(|f| {
                let mut s = current.clone();
                s.push(f.clone());
                s
            })
            .filter(|s| {
                let mut key = s.clone();
                key.sort();
                seen.insert(key)
            })
            .collect();
        if trials.is_empty() {
            break;
        }
        let scored = evaluate_all(table, trials, gam_config, config.threshold);
        let step = pick_winner(&scored, config.tie_tolerance).map(|i| scored[i].clone());
        evaluated.extend(scored);
        match step {
            Some(s) if s.deviance_explained.is_some_and(|d| d > current_dev) => {
                current_dev = s.deviance_explained.expect("checked");
                current = s.factors;
            }
            _ => break,
        }
    }
    let n_evaluated = evaluated.len();
    evaluated.sort_by(ranking_order);
    let winner = pick_winner(&evaluated, config.tie_tolerance).map(|i| evaluated[i].clone());
    Ok(SelectionResult {
        mode: SelectionMode::MultiFactor,
        winner,
        ranked: evaluated,
        exhaustive: false,
        n_evaluated,
    })
}

/// Single-factor selection: the scan ranking, winner = best significant
/// factor.
pub fn select_single_factor(
    table: &FactorTable,
    factors: &[String],
    config: &SelectConfig,
    gam_config: &GamConfig,
) -> SelectionResult {
    let ranked = single_factor_scan(table, factors, gam_config, config.threshold);
    let winner = pick_winner(&ranked, config.tie_tolerance).map(|i| ranked[i].clone());
    SelectionResult {
        mode: SelectionMode::SingleFactor,
        winner,
        n_evaluated: ranked.len(),
        ranked,
        exhaustive: true,
    }
}
