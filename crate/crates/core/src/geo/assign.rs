use serde::{Deserialize, Serialize};

use super::{haversine_km, within_buffer, ClusterGeometry, GeoPoint};
use crate::data::{BipartiteDataset, ClusterPartition};
use crate::error::{Error, Result};

/// Result of assigning outcome units to clusters of interventional units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub geometries: Vec<ClusterGeometry>,
    /// Cluster of each outcome unit, `None` when excluded.
    pub outcome_cluster: Vec<Option<usize>>,
    /// Clusters whose buffered hull contains each outcome unit.
    pub candidates: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    pub fn excluded(&self) -> Vec<usize> {
        self.outcome_cluster
            .iter()
            .enumerate()
            .filter_map(|(j, c)| c.is_none().then_some(j))
            .collect()
    }
}

fn location(id: &str, loc: Option<GeoPoint>) -> Result<GeoPoint> {
    loc.ok_or_else(|| Error::MissingLocation(id.to_owned()))
}

/// Assigns each outcome unit to the cluster whose buffered hull contains it.
/// Units inside several buffered hulls go to the cluster holding the closest
/// interventional unit among those clusters (ties: lowest cluster index);
/// units inside none are excluded.
///
/// `plant_clusters[i]` is the 0-based cluster of interventional unit `i`;
/// every cluster `0..K` must be nonempty.
pub fn assign_outcome_units(
    dataset: &BipartiteDataset,
    plant_clusters: &[usize],
    buffer_km: f64,
) -> Result<ClusterAssignment> {
    if plant_clusters.len() != dataset.n_interventional() {
        return Err(Error::InvalidPartition(format!(
            "{} cluster labels for {} interventional units",
            plant_clusters.len(),
            dataset.n_interventional()
        )));
    }
    let n_clusters = plant_clusters.iter().max().map_or(0, |m| m + 1);
    let plants: Vec<GeoPoint> = dataset
        .interventional()
        .iter()
        .map(|u| location(&u.id, u.location))
        .collect::<Result<_>>()?;
    let mut members = vec![Vec::new(); n_clusters];
    for (i, &k) in plant_clusters.iter().enumerate() {
        members[k].push(i);
    }
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidPartition(format!("cluster {k} has no interventional units")));
    }
    let geometries: Vec<ClusterGeometry> = members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let pts: Vec<GeoPoint> = m.iter().map(|&i| plants[i]).collect();
            ClusterGeometry::new(k, &pts, buffer_km)
        })
        .collect::<Result<_>>()?;

    let mut outcome_cluster = Vec::with_capacity(dataset.n_outcome());
    let mut candidates = Vec::with_capacity(dataset.n_outcome());
    for u in dataset.outcome() {
        let p = location(&u.id, u.location)?;
        let qualifying: Vec<usize> = geometries
            .iter()
            .filter(|g| within_buffer(g, p))
            .map(|g| g.cluster)
            .collect();
        let chosen = match qualifying.as_slice() {
            [] => None,
            [k] => Some(*k),
            many => {
                let mut best: Option<(f64, usize)> = None;
                for &k in many {
                    for &i in &members[k] {
                        let d = haversine_km(plants[i], p);
                        // strict `<` keeps the lowest cluster on ties since `many` is ascending
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, k));
                        }
                    }
                }
                best.map(|(_, k)| k)
            }
        };
        outcome_cluster.push(chosen);
        candidates.push(qualifying);
    }
    Ok(ClusterAssignment {
        geometries,
        outcome_cluster,
        candidates,
    })
}

/// Dataset restricted to assigned outcome units, with clusters lacking any
/// outcome unit dropped together with their interventional units.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSample {
    pub dataset: BipartiteDataset,
    pub partition: ClusterPartition,
    /// Original cluster index of each retained cluster.
    pub cluster_labels: Vec<usize>,
    pub excluded_outcomes: Vec<String>,
    pub dropped_clusters: Vec<usize>,
}

impl AnalysisSample {
    pub fn build(dataset: &BipartiteDataset, plant_clusters: &[usize], outcome_cluster: &[Option<usize>]) -> Result<Self> {
        let n_clusters = plant_clusters.iter().max().map_or(0, |m| m + 1);
        let mut has_outcomes = vec![false; n_clusters];
        for &k in outcome_cluster.iter().flatten() {
            if k >= n_clusters {
                return Err(Error::UnknownCluster {
                    cluster: k,
                    n_clusters,
                });
            }
            has_outcomes[k] = true;
        }
        let mut new_index = vec![None; n_clusters];
        let mut cluster_labels = Vec::new();
        let mut dropped_clusters = Vec::new();
        for k in 0..n_clusters {
            if has_outcomes[k] {
                new_index[k] = Some(cluster_labels.len());
                cluster_labels.push(k);
            } else {
                dropped_clusters.push(k);
            }
        }
        let keep_p: Vec<usize> = (0..plant_clusters.len())
            .filter(|&i| new_index[plant_clusters[i]].is_some())
            .collect();
        let keep_m: Vec<usize> = (0..outcome_cluster.len()).filter(|&j| outcome_cluster[j].is_some()).collect();
        let excluded_outcomes = (0..outcome_cluster.len())
            .filter(|&j| outcome_cluster[j].is_none())
            .map(|j| dataset.outcome()[j].id.clone())
            .collect();
        let partition = ClusterPartition::new(
            keep_p.iter().map(|&i| new_index[plant_clusters[i]].unwrap()).collect(),
            keep_m.iter().map(|&j| new_index[outcome_cluster[j].unwrap()].unwrap()).collect(),
            cluster_labels.len(),
        )?;
        Ok(Self {
            dataset: dataset.subset(&keep_p, &keep_m),
            partition,
            cluster_labels,
            excluded_outcomes,
            dropped_clusters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InterventionalUnit, OutcomeUnit};
    use crate::geo::EARTH_RADIUS_KM;
    use crate::interference::InterferenceMap;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn plant(id: &str, p: GeoPoint) -> InterventionalUnit {
        InterventionalUnit {
            id: id.into(),
            location: Some(p),
            covariates: vec![],
            treatment: Some(0),
        }
    }

    fn zip(id: &str, p: GeoPoint) -> OutcomeUnit {
        OutcomeUnit {
            id: id.into(),
            location: Some(p),
            covariates: vec![],
            outcome: Some(0.0),
        }
    }

    fn deg(km: f64) -> f64 {
        (km / EARTH_RADIUS_KM).to_degrees()
    }

    #[test]
    fn single_inclusion_overlap_and_exclusion() {
        // cluster 0 around lon -90, cluster 1 around lon -89.5: the gap
        // between them is inside both buffers
        let plants = vec![
            plant("a0", pt(40.0, -90.15)),
            plant("a1", pt(40.2, -90.15)),
            plant("b0", pt(40.0, -89.6)),
            plant("b1", pt(40.2, -89.6)),
        ];
        let gap_closer_to_b = pt(40.1, -89.85);
        let zips = vec![
            zip("inside_a", pt(40.1, -90.15)),
            zip("overlap", gap_closer_to_b),
            zip("far", pt(40.1 + deg(100.0), -95.0)),
        ];
        let ds = BipartiteDataset::new(plants, zips);
        let out = assign_outcome_units(&ds, &[0, 0, 1, 1], 30.0).unwrap();
        assert_eq!(out.outcome_cluster, vec![Some(0), Some(1), None]);
        assert_eq!(out.candidates[1], vec![0, 1]);
        assert_eq!(out.excluded(), vec![2]);
    }

    #[test]
    fn overlap_tie_goes_to_lowest_cluster() {
        let plants = vec![plant("a", pt(40.0, -90.5)), plant("b", pt(40.0, -89.5))];
        let ds = BipartiteDataset::new(plants, vec![zip("mid", pt(40.0, -90.0))]);
        let out = assign_outcome_units(&ds, &[1, 0], 50.0).unwrap();
        assert_eq!(out.candidates[0], vec![0, 1]);
        assert_eq!(out.outcome_cluster, vec![Some(0)]);
    }

    #[test]
    fn missing_location_is_an_error() {
        let mut p = plant("a", pt(40.0, -90.0));
        p.location = None;
        let ds = BipartiteDataset::new(vec![p], vec![zip("m", pt(40.0, -90.0))]);
        assert_eq!(
            assign_outcome_units(&ds, &[0], 30.0),
            Err(Error::MissingLocation("a".into()))
        );
    }

    fn random_world(seed: u64) -> (Vec<InterventionalUnit>, Vec<usize>, Vec<OutcomeUnit>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plants = Vec::new();
        let mut labels = Vec::new();
        for k in 0..6 {
            let (lat, lon) = (rng.random_range(30.0..45.0), rng.random_range(-110.0..-80.0));
            for s in 0..rng.random_range(1..5) {
                let p = pt(lat + rng.random_range(-1.0..1.0), lon + rng.random_range(-1.0..1.0));
                plants.push(plant(&format!("p{k}_{s}"), p));
                labels.push(k);
            }
        }
        let zips = (0..300)
            .map(|j| zip(&format!("m{j}"), pt(rng.random_range(29.0..46.0), rng.random_range(-111.0..-79.0))))
            .collect();
        (plants, labels, zips)
    }

    fn by_id(ds: &BipartiteDataset, out: &ClusterAssignment) -> HashMap<String, Option<usize>> {
        ds.outcome()
            .iter()
            .zip(&out.outcome_cluster)
            .map(|(u, &c)| (u.id.clone(), c))
            .collect()
    }

    #[test]
    fn assignment_is_invariant_to_unit_order() {
        let (plants, labels, zips) = random_world(3);
        let ds = BipartiteDataset::new(plants.clone(), zips.clone());
        let base = by_id(&ds, &assign_outcome_units(&ds, &labels, 30.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..plants.len()).collect();
            order.shuffle(&mut rng);
            let mut z = zips.clone();
            z.shuffle(&mut rng);
            let ds2 = BipartiteDataset::new(order.iter().map(|&i| plants[i].clone()).collect(), z);
            let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            assert_eq!(base, by_id(&ds2, &assign_outcome_units(&ds2, &l2, 30.0).unwrap()));
        }
    }

    #[test]
    fn containment_consistency_and_block_structure() {
        let (plants, labels, zips) = random_world(5);
        let ds = BipartiteDataset::new(plants, zips);
        let out = assign_outcome_units(&ds, &labels, 30.0).unwrap();
        for (j, u) in ds.outcome().iter().enumerate() {
            let p = u.location.unwrap();
            match out.outcome_cluster[j] {
                Some(k) => assert!(within_buffer(&out.geometries[k], p)),
                None => assert!(out.geometries.iter().all(|g| !within_buffer(g, p))),
            }
        }
        let sample = AnalysisSample::build(&ds, &labels, &out.outcome_cluster).unwrap();
        assert!(sample.partition.n_clusters() >= 1);
        let map = InterferenceMap::from_partition(&sample.partition).unwrap();
        assert!(map.check_partial_against_partition(&sample.partition).holds());
    }

    #[test]
    fn clusters_without_outcome_units_are_dropped() {
        let plants = vec![plant("a", pt(40.0, -90.0)), plant("b", pt(30.0, -80.0))];
        let ds = BipartiteDataset::new(plants, vec![zip("m", pt(40.0, -90.0)), zip("x", pt(0.0, 0.0))]);
        let out = assign_outcome_units(&ds, &[0, 1], 30.0).unwrap();
        let s = AnalysisSample::build(&ds, &[0, 1], &out.outcome_cluster).unwrap();
        assert_eq!(s.dropped_clusters, vec![1]);
        assert_eq!(s.excluded_outcomes, vec!["x".to_string()]);
        assert_eq!(s.dataset.n_interventional(), 1);
        assert_eq!(s.partition.n_clusters(), 1);
    }
}
