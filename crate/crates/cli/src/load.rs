use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bipartite_interference::data::OutcomeScale;
use bipartite_interference::geo::AnalysisSample;
use bipartite_interference::{io, BipartiteDataset, ClusterPartition, InterferenceMap, KeyAssignment};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Interventional units CSV: id, lat, lon, A, covariates..., optional cluster
    #[arg(long)]
    pub interventional: PathBuf,
    /// Outcome units CSV: id, lat, lon, Y, covariates...
    #[arg(long)]
    pub outcomes: PathBuf,
    /// Interference mapping edges CSV: outcome_id, interventional_id. Defaults
    /// to the block mapping of the cluster assignment.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Outcome-unit cluster assignment CSV (outcome_id, cluster), as written
    /// by assign-clusters. Outcome units missing from it are excluded. Without
    /// it, clusters are the connected components of the mapping.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Drop clusters left without outcome units instead of failing
    #[arg(long)]
    pub drop_empty_clusters: bool,
    /// Require outcomes to be nonnegative integer counts
    #[arg(long)]
    pub count_outcomes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRule {
    /// Nearest member of T_j when every unit has a location, else lowest index
    #[default]
    Auto,
    /// Nearest member of T_j by great-circle distance
    Nearest,
    /// Lowest-index member of T_j
    Lowest,
}

pub struct Prepared {
    pub dataset: BipartiteDataset,
    pub mapping: Option<InterferenceMap>,
    pub partition: Option<ClusterPartition>,
    /// Cluster label of each retained cluster, when clusters came from labels.
    pub cluster_labels: Option<Vec<String>>,
    pub excluded_outcomes: Vec<String>,
    pub dropped_clusters: Vec<String>,
}

impl Prepared {
    pub fn require_structure(&self) -> Result<(&InterferenceMap, &ClusterPartition)> {
        match (&self.mapping, &self.partition) {
            (Some(m), Some(p)) => Ok((m, p)),
            (None, _) => Err(Usage("a mapping is required: pass --edges or --assignment".into()).into()),
            (Some(_), None) => bail!(
                "the mapping does not induce a cluster partition (it is not partial or has isolated \
                 interventional units); pass --assignment"
            ),
        }
    }

    pub fn keys(&self, rule: KeyRule) -> Result<KeyAssignment> {
        let (mapping, _) = self.require_structure()?;
        let located = self.dataset.interventional().iter().all(|u| u.location.is_some())
            && self.dataset.outcome().iter().all(|u| u.location.is_some());
        Ok(match rule {
            KeyRule::Lowest => KeyAssignment::lowest_index(mapping),
            KeyRule::Auto if !located => KeyAssignment::lowest_index(mapping),
            KeyRule::Auto | KeyRule::Nearest => mapping.assign_key_associated(&self.dataset)?,
        })
    }
}

pub fn prepare(args: &DataArgs) -> Result<Prepared> {
    let loaded = io::read_dataset(&args.interventional, &args.outcomes)?;
    let mut dataset = loaded.dataset;
    if args.count_outcomes {
        dataset = dataset.with_outcome_scale(OutcomeScale::Count);
    }
    let Some(assignment) = &args.assignment else {
        let mapping = args
            .edges
            .as_ref()
            .map(|e| -> Result<_> { Ok(io::read_edges(open(e)?, &dataset)?) })
            .transpose()?;
        let partition = mapping.as_ref().and_then(|m| m.classify_structure().partition().cloned());
        return Ok(Prepared {
            dataset,
            mapping,
            partition,
            cluster_labels: None,
            excluded_outcomes: Vec::new(),
            dropped_clusters: Vec::new(),
        });
    };

    let Some(plant_labels) = loaded.clusters else {
        return Err(Usage("--assignment requires a `cluster` column in the interventional file".into()).into());
    };
    let (plant_idx, labels) = io::index_labels(&plant_labels);
    let outcome_labels = io::read_assignment(open(assignment)?, &dataset)?;
    let outcome_idx = outcome_labels
        .iter()
        .map(|l| match l {
            None => Ok(None),
            Some(l) => labels
                .iter()
                .position(|x| x == l)
                .map(Some)
                .with_context(|| format!("assignment refers to cluster `{l}` which has no interventional units")),
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = AnalysisSample::build(&dataset, &plant_idx, &outcome_idx)?;
    let dropped: Vec<String> = sample.dropped_clusters.iter().map(|&k| labels[k].clone()).collect();
    if !dropped.is_empty() && !args.drop_empty_clusters {
        bail!("clusters without outcome units: {dropped:?} (pass --drop-empty-clusters to drop them)");
    }
    let mapping = match &args.edges {
        None => InterferenceMap::from_partition(&sample.partition)?,
        Some(e) => {
            let full = io::read_edges(open(e)?, &dataset)?;
            restrict(&full, &dataset, &sample.dataset)?
        }
    };
    Ok(Prepared {
        cluster_labels: Some(sample.cluster_labels.iter().map(|&k| labels[k].clone()).collect()),
        dataset: sample.dataset,
        mapping: Some(mapping),
        partition: Some(sample.partition),
        excluded_outcomes: sample.excluded_outcomes,
        dropped_clusters: dropped,
    })
}

/// Mapping of `full` restricted to the units kept in `sub`, matched by id.
fn restrict(full: &InterferenceMap, dataset: &BipartiteDataset, sub: &BipartiteDataset) -> Result<InterferenceMap> {
    let mut edges = Vec::new();
    for (j, i) in full.edges() {
        let Some(sj) = sub.outcome_index(&dataset.outcome()[j].id) else {
            continue;
        };
        let pid = &dataset.interventional()[i].id;
        let si = sub
            .interventional_index(pid)
            .with_context(|| format!("outcome unit `{}` depends on dropped interventional unit `{pid}`", sub.outcome()[sj].id))?;
        edges.push((sj, si));
    }
    Ok(InterferenceMap::new(sub.n_outcome(), sub.n_interventional(), edges)?)
}

pub fn open(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

pub fn create(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    io::read_json(path).with_context(|| format!("reading {}", path.display()))
}

/// Parses a comma-separated list of probabilities.
pub fn parse_alphas(s: &str, flag: &str) -> Result<Vec<f64>> {
    let alphas = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|a| (0.0..=1.0).contains(a))
                .ok_or_else(|| Usage(format!("{flag}: `{t}` is not a probability in [0, 1]")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if alphas.is_empty() {
        return Err(Usage(format!("{flag} must list at least one value")).into());
    }
    Ok(alphas)
}
