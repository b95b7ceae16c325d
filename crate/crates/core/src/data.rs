//! Observational data for both unit levels and their cluster partition.
//!
//! Units are addressed by dense indices in dataset order; string ids only
//! matter at I/O boundaries and for error messages.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// A unit at which treatment is applied or withheld (e.g. a power plant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionalUnit {
    pub id: String,
    pub location: Option<GeoPoint>,
    pub covariates: Vec<f64>,
    /// Observed treatment. Stored as read so that out-of-domain values can
    /// be reported by [`BipartiteDataset::validate`].
    pub treatment: Option<u8>,
}

/// A unit at which outcomes are measured (e.g. a zip code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeUnit {
    pub id: String,
    pub location: Option<GeoPoint>,
    pub covariates: Vec<f64>,
    pub outcome: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeScale {
    #[default]
    Continuous,
    /// Outcomes must be nonnegative integers.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitLevel {
    Interventional,
    Outcome,
}

impl fmt::Display for UnitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitLevel::Interventional => f.write_str("interventional"),
            UnitLevel::Outcome => f.write_str("outcome"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateId,
    EmptyLevel,
    CovariateLength { expected: usize, got: usize },
    NonFiniteCovariate { column: usize },
    TreatmentDomain { value: u8 },
    NonFiniteOutcome,
    NonCountOutcome { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub level: UnitLevel,
    /// Offending unit id; `None` for dataset-wide violations.
    pub unit: Option<String>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = self.unit.as_deref().unwrap_or("-");
        match &self.kind {
            ViolationKind::DuplicateId => write!(f, "{} unit `{unit}`: duplicate id", self.level),
            ViolationKind::EmptyLevel => write!(f, "no {} units", self.level),
            ViolationKind::CovariateLength { expected, got } => write!(
                f,
                "{} unit `{unit}`: {got} covariates, expected {expected}",
                self.level
            ),
            ViolationKind::NonFiniteCovariate { column } => write!(
                f,
                "{} unit `{unit}`: covariate {column} is not finite",
                self.level
            ),
            ViolationKind::TreatmentDomain { value } => write!(
                f,
                "{} unit `{unit}`: treatment {value} is not 0 or 1",
                self.level
            ),
            ViolationKind::NonFiniteOutcome => {
                write!(f, "{} unit `{unit}`: outcome is not finite", self.level)
            }
            ViolationKind::NonCountOutcome { value } => write!(
                f,
                "{} unit `{unit}`: outcome {value} is not a nonnegative integer count",
                self.level
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteDataset {
    interventional: Vec<InterventionalUnit>,
    outcome: Vec<OutcomeUnit>,
    interventional_covariate_names: Vec<String>,
    outcome_covariate_names: Vec<String>,
    outcome_scale: OutcomeScale,
    interventional_index: HashMap<String, usize>,
    outcome_index: HashMap<String, usize>,
}

fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|c| format!("{prefix}{c}")).collect()
}

fn first_index<'a>(ids: impl Iterator<Item = &'a str>) -> HashMap<String, usize> {
    let mut map = HashMap::new();
    for (idx, id) in ids.enumerate() {
        map.entry(id.to_owned()).or_insert(idx);
    }
    map
}

impl BipartiteDataset {
    /// Builds a dataset with default covariate names `W1..Wd` / `X1..Xe`.
    ///
    /// No invariants are enforced here; call [`validate`](Self::validate).
    pub fn new(interventional: Vec<InterventionalUnit>, outcome: Vec<OutcomeUnit>) -> Self {
        let d = interventional.first().map_or(0, |u| u.covariates.len());
        let e = outcome.first().map_or(0, |u| u.covariates.len());
        Self::with_names(
            interventional,
            outcome,
            default_names("W", d),
            default_names("X", e),
        )
    }

    pub fn with_names(
        interventional: Vec<InterventionalUnit>,
        outcome: Vec<OutcomeUnit>,
        interventional_covariate_names: Vec<String>,
        outcome_covariate_names: Vec<String>,
    ) -> Self {
        let interventional_index = first_index(interventional.iter().map(|u| u.id.as_str()));
        let outcome_index = first_index(outcome.iter().map(|u| u.id.as_str()));
        Self {
            interventional,
            outcome,
            interventional_covariate_names,
            outcome_covariate_names,
            outcome_scale: OutcomeScale::Continuous,
            interventional_index,
            outcome_index,
        }
    }

    pub fn with_outcome_scale(mut self, scale: OutcomeScale) -> Self {
        self.outcome_scale = scale;
        self
    }

    pub fn interventional(&self) -> &[InterventionalUnit] {
        &self.interventional
    }

    pub fn outcome(&self) -> &[OutcomeUnit] {
        &self.outcome
    }

    pub fn interventional_mut(&mut self) -> &mut [InterventionalUnit] {
        &mut self.interventional
    }

    pub fn outcome_mut(&mut self) -> &mut [OutcomeUnit] {
        &mut self.outcome
    }

    pub fn n_interventional(&self) -> usize {
        self.interventional.len()
    }

    pub fn n_outcome(&self) -> usize {
        self.outcome.len()
    }

    pub fn interventional_covariate_names(&self) -> &[String] {
        &self.interventional_covariate_names
    }

    pub fn outcome_covariate_names(&self) -> &[String] {
        &self.outcome_covariate_names
    }

    pub fn outcome_scale(&self) -> OutcomeScale {
        self.outcome_scale
    }

    pub fn interventional_index(&self, id: &str) -> Option<usize> {
        self.interventional_index.get(id).copied()
    }

    pub fn outcome_index(&self, id: &str) -> Option<usize> {
        self.outcome_index.get(id).copied()
    }

    /// Observed treatments as booleans; errors on missing or out-of-domain values.
    pub fn observed_treatments(&self) -> Result<Vec<bool>> {
        self.interventional
            .iter()
            .map(|u| match u.treatment {
                Some(0) => Ok(false),
                Some(1) => Ok(true),
                Some(v) => Err(Error::InvalidDataset(format!(
                    "treatment {v} of unit `{}` is not binary",
                    u.id
                ))),
                None => Err(Error::MissingObservation {
                    what: "treatment",
                    id: u.id.clone(),
                }),
            })
            .collect()
    }

    pub fn observed_outcomes(&self) -> Result<Vec<f64>> {
        self.outcome
            .iter()
            .map(|u| {
                u.outcome.ok_or_else(|| Error::MissingObservation {
                    what: "outcome",
                    id: u.id.clone(),
                })
            })
            .collect()
    }

    /// Checks every type invariant and returns the violations found.
    /// An empty vector means the dataset is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.interventional.is_empty() {
            out.push(Violation {
                level: UnitLevel::Interventional,
                unit: None,
                kind: ViolationKind::EmptyLevel,
            });
        }
        if self.outcome.is_empty() {
            out.push(Violation {
                level: UnitLevel::Outcome,
                unit: None,
                kind: ViolationKind::EmptyLevel,
            });
        }

        let level = UnitLevel::Interventional;
        let expected = self.interventional_covariate_names.len();
        let mut seen = HashSet::new();
        for u in &self.interventional {
            if !seen.insert(u.id.as_str()) {
                out.push(violation(level, &u.id, ViolationKind::DuplicateId));
            }
            check_covariates(&mut out, level, &u.id, &u.covariates, expected);
            if let Some(value) = u.treatment.filter(|&v| v > 1) {
                out.push(violation(level, &u.id, ViolationKind::TreatmentDomain { value }));
            }
        }

        let level = UnitLevel::Outcome;
        let expected = self.outcome_covariate_names.len();
        let mut seen = HashSet::new();
        for u in &self.outcome {
            if !seen.insert(u.id.as_str()) {
                out.push(violation(level, &u.id, ViolationKind::DuplicateId));
            }
            check_covariates(&mut out, level, &u.id, &u.covariates, expected);
            if let Some(y) = u.outcome {
                if !y.is_finite() {
                    out.push(violation(level, &u.id, ViolationKind::NonFiniteOutcome));
                } else if self.outcome_scale == OutcomeScale::Count && (y < 0.0 || y.fract() != 0.0) {
                    out.push(violation(level, &u.id, ViolationKind::NonCountOutcome { value: y }));
                }
            }
        }
        out
    }

    /// Keeps the listed units (in the given order), dropping the rest.
    pub fn subset(&self, interventional: &[usize], outcome: &[usize]) -> Self {
        let mut out = Self::with_names(
            interventional.iter().map(|&i| self.interventional[i].clone()).collect(),
            outcome.iter().map(|&j| self.outcome[j].clone()).collect(),
            self.interventional_covariate_names.clone(),
            self.outcome_covariate_names.clone(),
        );
        out.outcome_scale = self.outcome_scale;
        out
    }
}

fn violation(level: UnitLevel, id: &str, kind: ViolationKind) -> Violation {
    Violation {
        level,
        unit: Some(id.to_owned()),
        kind,
    }
}

fn check_covariates(out: &mut Vec<Violation>, level: UnitLevel, id: &str, cov: &[f64], expected: usize) {
    if cov.len() != expected {
        out.push(violation(
            level,
            id,
            ViolationKind::CovariateLength {
                expected,
                got: cov.len(),
            },
        ));
    }
    if let Some(column) = cov.iter().position(|v| !v.is_finite()) {
        out.push(violation(level, id, ViolationKind::NonFiniteCovariate { column }));
    }
}

/// Partition of both unit levels into `K` clusters, each holding at least
/// one unit of each level. Cluster indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct ClusterPartition {
    interventional: Vec<usize>,
    outcome: Vec<usize>,
    interventional_members: Vec<Vec<usize>>,
    outcome_members: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    n_clusters: usize,
    interventional: Vec<usize>,
    outcome: Vec<usize>,
}

impl TryFrom<PartitionRepr> for ClusterPartition {
    type Error = Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        ClusterPartition::new(r.interventional, r.outcome, r.n_clusters)
    }
}

impl From<ClusterPartition> for PartitionRepr {
    fn from(p: ClusterPartition) -> Self {
        PartitionRepr {
            n_clusters: p.n_clusters(),
            interventional: p.interventional,
            outcome: p.outcome,
        }
    }
}

impl ClusterPartition {
    /// `interventional[i]` / `outcome[j]` give the cluster of each unit.
    pub fn new(interventional: Vec<usize>, outcome: Vec<usize>, n_clusters: usize) -> Result<Self> {
        let members = |labels: &[usize], what: &str| -> Result<Vec<Vec<usize>>> {
            let mut m = vec![Vec::new(); n_clusters];
            for (idx, &k) in labels.iter().enumerate() {
                if k >= n_clusters {
                    return Err(Error::InvalidPartition(format!(
                        "{what} unit {idx} assigned to cluster {k} but K = {n_clusters}"
                    )));
                }
                m[k].push(idx);
            }
            if let Some(k) = m.iter().position(Vec::is_empty) {
                return Err(Error::InvalidPartition(format!("cluster {k} has no {what} units")));
            }
            Ok(m)
        };
        let interventional_members = members(&interventional, "interventional")?;
        let outcome_members = members(&outcome, "outcome")?;
        Ok(Self {
            interventional,
            outcome,
            interventional_members,
            outcome_members,
        })
    }

    /// A single cluster containing everything.
    pub fn single(n_interventional: usize, n_outcome: usize) -> Result<Self> {
        Self::new(vec![0; n_interventional], vec![0; n_outcome], 1)
    }

    pub fn n_clusters(&self) -> usize {
        self.interventional_members.len()
    }

    pub fn n_interventional(&self) -> usize {
        self.interventional.len()
    }

    pub fn n_outcome(&self) -> usize {
        self.outcome.len()
    }

    pub fn cluster_of_interventional(&self, i: usize) -> usize {
        self.interventional[i]
    }

    pub fn cluster_of_outcome(&self, j: usize) -> usize {
        self.outcome[j]
    }

    pub fn interventional_members(&self, k: usize) -> &[usize] {
        &self.interventional_members[k]
    }

    pub fn outcome_members(&self, k: usize) -> &[usize] {
        &self.outcome_members[k]
    }

    pub fn interventional_labels(&self) -> &[usize] {
        &self.interventional
    }

    pub fn outcome_labels(&self) -> &[usize] {
        &self.outcome
    }

    pub fn check_cluster(&self, k: usize) -> Result<()> {
        if k < self.n_clusters() {
            Ok(())
        } else {
            Err(Error::UnknownCluster {
                cluster: k,
                n_clusters: self.n_clusters(),
            })
        }
    }

    pub fn check_dimensions(&self, dataset: &BipartiteDataset) -> Result<()> {
        if self.n_interventional() != dataset.n_interventional() || self.n_outcome() != dataset.n_outcome() {
            return Err(Error::InvalidPartition(format!(
                "partition covers {}x{} units, dataset has {}x{}",
                self.n_interventional(),
                self.n_outcome(),
                dataset.n_interventional(),
                dataset.n_outcome()
            )));
        }
        Ok(())
    }
}

/// Observed data restricted to one cluster, in canonical dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterView {
    pub cluster: usize,
    pub interventional: Vec<usize>,
    pub outcome: Vec<usize>,
    pub treatments: Vec<bool>,
    pub interventional_covariates: Vec<Vec<f64>>,
    pub outcome_covariates: Vec<Vec<f64>>,
    pub outcomes: Vec<f64>,
}

pub fn cluster_view(dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Result<ClusterView> {
    partition.check_cluster(k)?;
    partition.check_dimensions(dataset)?;
    let interventional = partition.interventional_members(k).to_vec();
    let outcome = partition.outcome_members(k).to_vec();
    let mut treatments = Vec::with_capacity(interventional.len());
    for &i in &interventional {
        let u = &dataset.interventional()[i];
        treatments.push(match u.treatment {
            Some(0) => false,
            Some(1) => true,
            Some(v) => {
                return Err(Error::InvalidDataset(format!(
                    "treatment {v} of unit `{}` is not binary",
                    u.id
                )))
            }
            None => {
                return Err(Error::MissingObservation {
                    what: "treatment",
                    id: u.id.clone(),
                })
            }
        });
    }
    let mut outcomes = Vec::with_capacity(outcome.len());
    for &j in &outcome {
        let u = &dataset.outcome()[j];
        outcomes.push(u.outcome.ok_or_else(|| Error::MissingObservation {
            what: "outcome",
            id: u.id.clone(),
        })?);
    }
    Ok(ClusterView {
        cluster: k,
        interventional_covariates: interventional
            .iter()
            .map(|&i| dataset.interventional()[i].covariates.clone())
            .collect(),
        outcome_covariates: outcome.iter().map(|&j| dataset.outcome()[j].covariates.clone()).collect(),
        interventional,
        outcome,
        treatments,
        outcomes,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn plant(id: &str, a: u8, w: &[f64]) -> InterventionalUnit {
        InterventionalUnit {
            id: id.into(),
            location: None,
            covariates: w.to_vec(),
            treatment: Some(a),
        }
    }

    pub(crate) fn zip(id: &str, y: f64) -> OutcomeUnit {
        OutcomeUnit {
            id: id.into(),
            location: None,
            covariates: vec![],
            outcome: Some(y),
        }
    }

    fn toy() -> BipartiteDataset {
        BipartiteDataset::new(
            vec![plant("p1", 1, &[0.1]), plant("p2", 0, &[0.2]), plant("p3", 1, &[0.3])],
            vec![zip("m1", 1.0), zip("m2", 2.0), zip("m3", 3.0), zip("m4", 4.0)],
        )
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        assert!(toy().validate().is_empty());
    }

    #[test]
    fn duplicate_interventional_id_reported_once() {
        let mut units = toy().interventional().to_vec();
        units[1].id = "p1".into();
        let ds = BipartiteDataset::new(units, toy().outcome().to_vec());
        let report = ds.validate();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kind, ViolationKind::DuplicateId);
        assert_eq!(report[0].unit.as_deref(), Some("p1"));
    }

    #[test]
    fn non_binary_treatment_names_the_unit() {
        let mut ds = toy();
        ds.interventional_mut()[2].treatment = Some(2);
        let report = ds.validate();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kind, ViolationKind::TreatmentDomain { value: 2 });
        assert_eq!(report[0].unit.as_deref(), Some("p3"));
        assert!(report[0].to_string().contains("p3"));
    }

    #[test]
    fn ragged_covariates_and_count_outcomes() {
        let mut ds = toy().with_outcome_scale(OutcomeScale::Count);
        ds.interventional_mut()[0].covariates.push(1.0);
        ds.outcome_mut()[3].outcome = Some(2.5);
        ds.outcome_mut()[2].outcome = Some(-1.0);
        let kinds: Vec<_> = ds.validate().into_iter().map(|v| v.kind).collect();
        assert_eq!(kinds.len(), 3);
        assert!(kinds.contains(&ViolationKind::CovariateLength { expected: 1, got: 2 }));
        assert!(kinds.contains(&ViolationKind::NonCountOutcome { value: 2.5 }));
    }

    #[test]
    fn empty_levels_reported() {
        let ds = BipartiteDataset::new(vec![], vec![]);
        assert_eq!(ds.validate().len(), 2);
    }

    #[test]
    fn single_cluster_view_is_whole_dataset() {
        let ds = toy();
        let part = ClusterPartition::single(3, 4).unwrap();
        let v = cluster_view(&ds, &part, 0).unwrap();
        assert_eq!(v.treatments, vec![true, false, true]);
        assert_eq!(v.outcomes, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.interventional_covariates, vec![vec![0.1], vec![0.2], vec![0.3]]);
    }

    #[test]
    fn restricted_view() {
        let ds = toy();
        let part = ClusterPartition::new(vec![0, 0, 1], vec![0, 1, 1, 1], 2).unwrap();
        let v = cluster_view(&ds, &part, 0).unwrap();
        assert_eq!(v.treatments, vec![true, false]);
        assert_eq!(v.outcomes, vec![1.0]);
        assert_eq!(
            cluster_view(&ds, &part, 2),
            Err(Error::UnknownCluster {
                cluster: 2,
                n_clusters: 2
            })
        );
    }

    #[test]
    fn missing_treatment_is_an_error() {
        let mut ds = toy();
        ds.interventional_mut()[0].treatment = None;
        let part = ClusterPartition::single(3, 4).unwrap();
        assert!(matches!(
            cluster_view(&ds, &part, 0),
            Err(Error::MissingObservation { what: "treatment", .. })
        ));
    }

    #[test]
    fn partition_requires_both_levels_per_cluster() {
        assert!(ClusterPartition::new(vec![0, 0], vec![0, 0], 2).is_err());
        assert!(ClusterPartition::new(vec![0, 2], vec![0, 1], 2).is_err());
    }

    #[test]
    fn cluster_views_partition_the_index_sets() {
        let ds = toy();
        let part = ClusterPartition::new(vec![1, 0, 1], vec![0, 1, 0, 1], 2).unwrap();
        let mut p = Vec::new();
        let mut m = Vec::new();
        for k in 0..2 {
            let v = cluster_view(&ds, &part, k).unwrap();
            p.extend(v.interventional);
            m.extend(v.outcome);
        }
        p.sort();
        m.sort();
        assert_eq!(p, vec![0, 1, 2]);
        assert_eq!(m, vec![0, 1, 2, 3]);
    }
}
