//! Inverse-probability-of-treatment weighted estimators of cluster and
//! population key-associated averages, their direct and indirect contrasts,
//! and Wald intervals from the between-cluster variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationStrategy;
use crate::data::{BipartiteDataset, ClusterPartition};
use crate::error::{Error, Result};
use crate::interference::{InterferenceMap, KeyAssignment};
use crate::propensity::{positivity_diagnostics, ClusterModel, ClusterPropensity, PositivityReport, DEFAULT_WEIGHT_THRESHOLD};

/// Normal quantile used for 95% intervals.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub alphas: Vec<f64>,
    /// Fixed level for reported indirect effects.
    pub indirect_level: u8,
    /// Pairs `(α, α')` for indirect effects; empty means every ordered pair
    /// of distinct grid values with `α < α'`.
    #[serde(default)]
    pub indirect_pairs: Vec<(f64, f64)>,
    /// Per-outcome-unit weights above this value are capped. Off by default.
    #[serde(default)]
    pub truncation: Option<f64>,
    /// Exclude clusters whose observed treatment vector has zero modelled
    /// probability instead of failing.
    #[serde(default)]
    pub drop_underflow: bool,
    pub weight_threshold: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alphas: Vec::new(),
            indirect_level: 0,
            indirect_pairs: Vec::new(),
            truncation: None,
            drop_underflow: false,
            weight_threshold: DEFAULT_WEIGHT_THRESHOLD,
        }
    }
}

impl EstimatorConfig {
    pub fn with_alphas(alphas: Vec<f64>) -> Self {
        Self {
            alphas,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config("the allocation grid is empty".into()));
        }
        for &a in self.alphas.iter().chain(self.indirect_pairs.iter().flat_map(|(a, b)| [a, b])) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidAlpha(a));
            }
        }
        if self.indirect_level > 1 {
            return Err(Error::Config(format!("fixed level must be 0 or 1, got {}", self.indirect_level)));
        }
        if let Some(t) = self.truncation {
            if t.is_nan() || t <= 1.0 {
                return Err(Error::Config(format!("truncation threshold must exceed 1, got {t}")));
            }
        }
        Ok(())
    }

    pub(crate) fn pairs(&self) -> Vec<(f64, f64)> {
        if !self.indirect_pairs.is_empty() {
            return self.indirect_pairs.clone();
        }
        let mut pairs = Vec::new();
        for (x, &a) in self.alphas.iter().enumerate() {
            for &b in &self.alphas[x + 1..] {
                if a != b {
                    pairs.push((a.min(b), a.max(b)));
                }
            }
        }
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimand", rename_all = "snake_case")]
pub enum Estimate {
    /// `Ŷ(A_i* = a; α)`
    Average { a: u8, alpha: f64 },
    /// `DE*(α)`
    Direct { alpha: f64 },
    /// `IE*ᵃ(α, α')`
    Indirect { a: u8, alpha: f64, alpha_prime: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithCI {
    pub estimand: Estimate,
    pub point: f64,
    /// Absent when fewer than two clusters contribute.
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterContribution {
    pub k: usize,
    pub a: u8,
    pub alpha: f64,
    /// `Ŷᵏ(A_i* = a; α)`
    pub estimate: f64,
    /// Largest weight applied to an outcome unit whose key has level `a`.
    pub max_weight: f64,
    pub n_outcome: usize,
    /// Outcome units whose key has level `a`.
    pub n_used: usize,
}

/// Observed quantities of one cluster in member order.
struct ClusterObs {
    treatments: Vec<bool>,
    /// `(position of i*(j) among the interventional members, Y_j)`
    outcomes: Vec<(usize, f64)>,
    propensity: f64,
    log_propensity: f64,
}

fn cluster_obs(
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    treatments: &[bool],
    outcomes: &[f64],
    model: &ClusterModel,
    k: usize,
) -> Result<ClusterObs> {
    let members = partition.interventional_members(k);
    let a: Vec<bool> = members.iter().map(|&i| treatments[i]).collect();
    let outcomes = partition
        .outcome_members(k)
        .iter()
        .map(|&j| {
            let key = keys.key(j);
            let pos = members.binary_search(&key).map_err(|_| Error::NotInInterferenceSet {
                outcome: j,
                interventional: key,
            })?;
            Ok((pos, outcomes[j]))
        })
        .collect::<Result<_>>()?;
    let (propensity, log_propensity) = match model {
        ClusterModel::Probabilities(p) => {
            let f: f64 = p.iter().zip(&a).map(|(&p, &t)| if t { p } else { 1.0 - p }).product();
            (f, f.ln())
        }
        _ => {
            let lf = model.log_probability(&a)?;
            (lf.exp(), lf)
        }
    };
    Ok(ClusterObs {
        treatments: a,
        outcomes,
        propensity,
        log_propensity,
    })
}

impl ClusterObs {
    fn underflows(&self) -> bool {
        self.log_propensity == f64::NEG_INFINITY || self.log_propensity.is_nan()
    }

    fn contribution(&self, k: usize, a: bool, strategy: &AllocationStrategy, truncation: Option<f64>) -> ClusterContribution {
        let mut total = 0.0;
        let mut max_weight: f64 = 0.0;
        let mut n_used = 0;
        for &(pos, y) in &self.outcomes {
            if self.treatments[pos] != a {
                continue;
            }
            let rest = self.treatments.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, &t)| t);
            // ratio in linear space while the denominator is a normal float,
            // so hand-checkable cases reproduce exactly
            let mut w = if self.propensity.is_normal() {
                let pi: f64 = match *strategy {
                    AllocationStrategy::IndependentBernoulli { alpha } => rest.map(|t| if t { alpha } else { 1.0 - alpha }).product(),
                };
                pi / self.propensity
            } else {
                (strategy.log_pi(rest) - self.log_propensity).exp()
            };
            if let Some(t) = truncation {
                w = w.min(t);
            }
            max_weight = max_weight.max(w);
            total += w * y;
            n_used += 1;
        }
        ClusterContribution {
            k,
            a: u8::from(a),
            alpha: strategy.alpha(),
            estimate: total / self.outcomes.len() as f64,
            max_weight,
            n_outcome: self.outcomes.len(),
            n_used,
        }
    }
}

/// `Ŷᵏ(A_i* = a; α)` for cluster `k`. The key of every outcome unit must be
/// an interventional member of the same cluster.
pub fn cluster_estimate(
    dataset: &BipartiteDataset,
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    propensity: &dyn ClusterPropensity,
    a: bool,
    strategy: &AllocationStrategy,
    k: usize,
) -> Result<ClusterContribution> {
    partition.check_cluster(k)?;
    partition.check_dimensions(dataset)?;
    let treatments = dataset.observed_treatments()?;
    let outcomes = dataset.observed_outcomes()?;
    let model = propensity.cluster_model(dataset, partition, k)?;
    let obs = cluster_obs(partition, keys, &treatments, &outcomes, &model, k)?;
    if obs.underflows() {
        return Err(Error::DenominatorUnderflow { cluster: k });
    }
    Ok(obs.contribution(k, a, strategy, None))
}

/// Mean with the between-cluster standard error `sqrt(Σ(x − x̄)² / (K(K−1)))`.
fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, Some((ss / (k * (k - 1.0))).sqrt()))
}

fn with_ci(estimand: Estimate, values: &[f64]) -> Result<EstimateWithCI> {
    if values.is_empty() {
        return Err(Error::Config("no cluster contributions".into()));
    }
    let (point, std_error) = mean_and_se(values);
    Ok(EstimateWithCI {
        estimand,
        point,
        std_error,
        ci_low: std_error.map(|se| point - Z_95 * se),
        ci_high: std_error.map(|se| point + Z_95 * se),
    })
}

/// `Ŷ = (1/K) Σₖ Ŷᵏ` with its Wald interval.
pub fn population_estimate(contributions: &[f64], a: u8, alpha: f64) -> Result<EstimateWithCI> {
    with_ci(Estimate::Average { a, alpha }, contributions)
}

/// Per-cluster contributions on the `(a, α)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionGrid {
    pub alphas: Vec<f64>,
    /// Cluster indices in row order.
    pub clusters: Vec<usize>,
    /// `values[a][g][row]` for level `a` and grid index `g`.
    pub values: [Vec<Vec<f64>>; 2],
}

impl ContributionGrid {
    pub fn cell(&self, a: u8, alpha: f64) -> Result<&[f64]> {
        let g = self.alphas.iter().position(|&x| x == alpha);
        match (g, self.values.get(a as usize)) {
            (Some(g), Some(level)) if g < level.len() => Ok(&level[g]),
            _ => Err(Error::MissingCell { a, alpha }),
        }
    }

    pub fn average(&self, a: u8, alpha: f64) -> Result<EstimateWithCI> {
        population_estimate(self.cell(a, alpha)?, a, alpha)
    }

    /// `DE*(α)` with the variance of the per-cluster paired contrasts.
    pub fn direct(&self, alpha: f64) -> Result<EstimateWithCI> {
        let (y1, y0) = (self.cell(1, alpha)?, self.cell(0, alpha)?);
        let d: Vec<f64> = y1.iter().zip(y0).map(|(a, b)| a - b).collect();
        with_ci(Estimate::Direct { alpha }, &d)
    }

    /// `IE*ᵃ(α, α')` with the variance of the per-cluster paired contrasts.
    pub fn indirect(&self, a: u8, alpha: f64, alpha_prime: f64) -> Result<EstimateWithCI> {
        let (x, y) = (self.cell(a, alpha)?, self.cell(a, alpha_prime)?);
        let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        with_ci(Estimate::Indirect { a, alpha, alpha_prime }, &d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub averages: Vec<EstimateWithCI>,
    pub direct: Vec<EstimateWithCI>,
    pub indirect: Vec<EstimateWithCI>,
}

/// Averages at both levels, `DE*` at every grid value, and `IE*` at the
/// configured pairs.
pub fn effect_estimates(grid: &ContributionGrid, config: &EstimatorConfig) -> Result<Effects> {
    let mut averages = Vec::new();
    for a in 0..2u8 {
        for &alpha in &grid.alphas {
            averages.push(grid.average(a, alpha)?);
        }
    }
    let direct = grid.alphas.iter().map(|&alpha| grid.direct(alpha)).collect::<Result<_>>()?;
    let indirect = config
        .pairs()
        .into_iter()
        .map(|(alpha, alpha_prime)| grid.indirect(config.indirect_level, alpha, alpha_prime))
        .collect::<Result<_>>()?;
    Ok(Effects {
        averages,
        direct,
        indirect,
    })
}

/// Grid evaluation from raw vectors and per-cluster treatment models. Rows
/// of clusters that underflow are dropped when configured.
pub(crate) fn grid_from_parts(
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    treatments: &[bool],
    outcomes: &[f64],
    models: &[ClusterModel],
    config: &EstimatorConfig,
) -> Result<(ContributionGrid, Vec<ClusterContribution>, Vec<usize>)> {
    config.validate()?;
    let strategies = config
        .alphas
        .iter()
        .map(|&a| AllocationStrategy::bernoulli(a))
        .collect::<Result<Vec<_>>>()?;
    let per_cluster: Vec<Result<Option<Vec<ClusterContribution>>>> = (0..partition.n_clusters())
        .into_par_iter()
        .map(|k| {
            let obs = cluster_obs(partition, keys, treatments, outcomes, &models[k], k)?;
            if obs.underflows() {
                return if config.drop_underflow {
                    Ok(None)
                } else {
                    Err(Error::DenominatorUnderflow { cluster: k })
                };
            }
            let mut out = Vec::with_capacity(2 * strategies.len());
            for a in [false, true] {
                for s in &strategies {
                    out.push(obs.contribution(k, a, s, config.truncation));
                }
            }
            Ok(Some(out))
        })
        .collect();

    let g = strategies.len();
    let mut values = [vec![Vec::new(); g], vec![Vec::new(); g]];
    let mut clusters = Vec::new();
    let mut dropped = Vec::new();
    let mut audit = Vec::new();
    for (k, r) in per_cluster.into_iter().enumerate() {
        match r? {
            None => dropped.push(k),
            Some(contribs) => {
                clusters.push(k);
                for (idx, c) in contribs.iter().enumerate() {
                    values[idx / g][idx % g].push(c.estimate);
                }
                audit.extend(contribs);
            }
        }
    }
    if clusters.is_empty() {
        return Err(Error::Config("every cluster was excluded".into()));
    }
    Ok((
        ContributionGrid {
            alphas: config.alphas.clone(),
            clusters,
            values,
        },
        audit,
        dropped,
    ))
}

fn check_structure(mapping: &InterferenceMap, partition: &ClusterPartition, keys: &KeyAssignment) -> Result<()> {
    let check = mapping.check_partial_against_partition(partition);
    if !check.holds() {
        return Err(Error::PartialInterferenceViolation {
            n_violations: check.violations.len(),
        });
    }
    if keys.len() != partition.n_outcome() {
        return Err(Error::Config(format!("{} keys for {} outcome units", keys.len(), partition.n_outcome())));
    }
    for j in 0..keys.len() {
        if !mapping.contains(j, keys.key(j)) {
            return Err(Error::NotInInterferenceSet {
                outcome: j,
                interventional: keys.key(j),
            });
        }
    }
    Ok(())
}

/// The contribution grid for an observed dataset.
pub fn estimate_grid(
    dataset: &BipartiteDataset,
    mapping: &InterferenceMap,
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    propensity: &dyn ClusterPropensity,
    config: &EstimatorConfig,
) -> Result<(ContributionGrid, Vec<ClusterContribution>, Vec<usize>)> {
    config.validate()?;
    partition.check_dimensions(dataset)?;
    mapping.check_dataset(dataset)?;
    check_structure(mapping, partition, keys)?;
    let treatments = dataset.observed_treatments()?;
    let outcomes = dataset.observed_outcomes()?;
    let models = (0..partition.n_clusters())
        .into_par_iter()
        .map(|k| propensity.cluster_model(dataset, partition, k))
        .collect::<Result<Vec<_>>>()?;
    grid_from_parts(partition, keys, &treatments, &outcomes, &models, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub config: EstimatorConfig,
    pub n_clusters: usize,
    pub excluded_clusters: Vec<usize>,
    pub effects: Effects,
    pub positivity: PositivityReport,
    pub contributions: Vec<ClusterContribution>,
}

/// Full estimation: grid, effects, positivity diagnostics and per-cluster
/// contributions.
pub fn estimate_all(
    dataset: &BipartiteDataset,
    mapping: &InterferenceMap,
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    propensity: &dyn ClusterPropensity,
    config: &EstimatorConfig,
) -> Result<EstimationReport> {
    let (grid, contributions, excluded) = estimate_grid(dataset, mapping, partition, keys, propensity, config)?;
    let effects = effect_estimates(&grid, config)?;
    let strategies = config
        .alphas
        .iter()
        .map(|&a| AllocationStrategy::bernoulli(a))
        .collect::<Result<Vec<_>>>()?;
    let positivity = positivity_diagnostics(propensity, dataset, partition, keys, &strategies, config.weight_threshold)?;
    Ok(EstimationReport {
        config: config.clone(),
        n_clusters: grid.clusters.len(),
        excluded_clusters: excluded,
        effects,
        positivity,
        contributions,
    })
}
