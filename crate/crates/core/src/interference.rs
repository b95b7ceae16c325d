//! The M×P binary interference mapping between outcome and interventional
//! units, stored as two sorted adjacency lists (row-major and column-major).

use serde::{Deserialize, Serialize};

use crate::data::{BipartiteDataset, ClusterPartition};
use crate::error::{Error, Result};
use crate::geo::haversine_km;

/// Compressed adjacency: `targets[offsets[v]..offsets[v + 1]]` are the sorted
/// neighbours of `v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    fn from_sorted_pairs(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut offsets = vec![0; n + 1];
        let mut targets = Vec::new();
        for (src, dst) in pairs {
            offsets[src + 1] += 1;
            targets.push(dst);
        }
        for v in 0..n {
            offsets[v + 1] += offsets[v];
        }
        Self { offsets, targets }
    }

    fn neighbours(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MappingRepr", into = "MappingRepr")]
pub struct InterferenceMap {
    n_outcome: usize,
    n_interventional: usize,
    rows: Adjacency,
    cols: Adjacency,
}

#[derive(Serialize, Deserialize)]
struct MappingRepr {
    n_outcome: usize,
    n_interventional: usize,
    /// `(outcome, interventional)` pairs, 0-based.
    edges: Vec<(usize, usize)>,
}

impl TryFrom<MappingRepr> for InterferenceMap {
    type Error = Error;
    fn try_from(r: MappingRepr) -> Result<Self> {
        InterferenceMap::new(r.n_outcome, r.n_interventional, r.edges)
    }
}

impl From<InterferenceMap> for MappingRepr {
    fn from(m: InterferenceMap) -> Self {
        MappingRepr {
            n_outcome: m.n_outcome,
            n_interventional: m.n_interventional,
            edges: m.edges().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipError {
    /// `interventional` is in the cluster but not in the outcome unit's set.
    Missing,
    /// `interventional` is in the outcome unit's set but outside its cluster.
    Foreign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialViolation {
    pub outcome: usize,
    pub interventional: usize,
    pub kind: MembershipError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialCheck {
    pub violations: Vec<PartialViolation>,
}

impl PartialCheck {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum StructureClass {
    /// Every outcome unit has exactly one interventional unit, and sets are
    /// equal or disjoint.
    ClusteredNoInterference { partition: Option<ClusterPartition> },
    /// Sets are equal or disjoint and some set has more than one member.
    PartialInterference { partition: Option<ClusterPartition> },
    General,
}

impl StructureClass {
    pub fn name(&self) -> &'static str {
        match self {
            StructureClass::ClusteredNoInterference { .. } => "ClusteredNoInterference",
            StructureClass::PartialInterference { .. } => "PartialInterference",
            StructureClass::General => "General",
        }
    }

    /// Induced partition (connected components). `None` for general maps
    /// and when some interventional unit has no downwind outcome unit.
    pub fn partition(&self) -> Option<&ClusterPartition> {
        match self {
            StructureClass::ClusteredNoInterference { partition } | StructureClass::PartialInterference { partition } => {
                partition.as_ref()
            }
            StructureClass::General => None,
        }
    }
}

impl InterferenceMap {
    /// Builds the mapping from `(outcome, interventional)` edges (0-based).
    /// Duplicate edges are merged. Every outcome unit must have a nonempty
    /// interference set.
    pub fn new(n_outcome: usize, n_interventional: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
        if let Some(&(j, i)) = edges.iter().find(|&&(j, i)| j >= n_outcome || i >= n_interventional) {
            return Err(Error::EdgeOutOfRange {
                outcome: j,
                interventional: i,
                n_outcome,
                n_interventional,
            });
        }
        edges.sort_unstable();
        edges.dedup();
        let rows = Adjacency::from_sorted_pairs(n_outcome, edges.iter().copied());
        let empty: Vec<usize> = (0..n_outcome).filter(|&j| rows.neighbours(j).is_empty()).collect();
        if !empty.is_empty() {
            return Err(Error::EmptyInterferenceSet(empty));
        }
        let mut transposed: Vec<(usize, usize)> = edges.iter().map(|&(j, i)| (i, j)).collect();
        transposed.sort_unstable();
        let cols = Adjacency::from_sorted_pairs(n_interventional, transposed.into_iter());
        Ok(Self {
            n_outcome,
            n_interventional,
            rows,
            cols,
        })
    }

    /// Builds from a dense 0/1 matrix given row by row (one row per outcome unit).
    pub fn from_dense(rows: &[&[u8]]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        let mut edges = Vec::new();
        for (j, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidWorld(format!("row {j} has {} columns, expected {p}", row.len())));
            }
            edges.extend(row.iter().enumerate().filter(|(_, &t)| t != 0).map(|(i, _)| (j, i)));
        }
        Self::new(rows.len(), p, edges)
    }

    /// The block mapping of a partition: `T_j = P^k` for every `j` in `M^k`.
    pub fn from_partition(partition: &ClusterPartition) -> Result<Self> {
        let edges = (0..partition.n_outcome()).flat_map(|j| {
            let k = partition.cluster_of_outcome(j);
            partition.interventional_members(k).iter().map(move |&i| (j, i))
        });
        Self::new(partition.n_outcome(), partition.n_interventional(), edges.collect::<Vec<_>>())
    }

    pub fn n_outcome(&self) -> usize {
        self.n_outcome
    }

    pub fn n_interventional(&self) -> usize {
        self.n_interventional
    }

    pub fn n_edges(&self) -> usize {
        self.rows.targets.len()
    }

    /// Sorted interference set `T_j`.
    pub fn interference_set(&self, j: usize) -> Result<&[usize]> {
        if j >= self.n_outcome {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.n_outcome,
            });
        }
        Ok(self.rows.neighbours(j))
    }

    /// Sorted downwind set `T_i^T`: outcome units whose set contains `i`.
    pub fn downwind_set(&self, i: usize) -> Result<&[usize]> {
        if i >= self.n_interventional {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_interventional,
            });
        }
        Ok(self.cols.neighbours(i))
    }

    pub fn contains(&self, j: usize, i: usize) -> bool {
        j < self.n_outcome && self.rows.neighbours(j).binary_search(&i).is_ok()
    }

    /// All edges `(outcome, interventional)` in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_outcome).flat_map(move |j| self.rows.neighbours(j).iter().map(move |&i| (j, i)))
    }

    pub fn classify_structure(&self) -> StructureClass {
        let components = self.components();
        // rows are equal-or-disjoint iff each row equals its component's interventional set
        let mut comp_p: Vec<Vec<usize>> = vec![Vec::new(); components.count];
        for i in 0..self.n_interventional {
            comp_p[components.interventional[i]].push(i);
        }
        let equal_or_disjoint = (0..self.n_outcome).all(|j| self.rows.neighbours(j) == comp_p[components.outcome[j]].as_slice());
        if !equal_or_disjoint {
            return StructureClass::General;
        }
        let partition = if (0..self.n_interventional).any(|i| self.cols.neighbours(i).is_empty()) {
            None
        } else {
            ClusterPartition::new(components.interventional, components.outcome, components.count).ok()
        };
        if (0..self.n_outcome).all(|j| self.rows.neighbours(j).len() == 1) {
            StructureClass::ClusteredNoInterference { partition }
        } else {
            StructureClass::PartialInterference { partition }
        }
    }

    /// Connected components of the bipartite graph, numbered by first
    /// appearance in outcome order, then isolated interventional units.
    fn components(&self) -> Components {
        const UNSET: usize = usize::MAX;
        let mut outcome = vec![UNSET; self.n_outcome];
        let mut interventional = vec![UNSET; self.n_interventional];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.n_outcome {
            if outcome[start] != UNSET {
                continue;
            }
            outcome[start] = count;
            stack.push(start);
            while let Some(j) = stack.pop() {
                for &i in self.rows.neighbours(j) {
                    if interventional[i] == UNSET {
                        interventional[i] = count;
                        for &j2 in self.cols.neighbours(i) {
                            if outcome[j2] == UNSET {
                                outcome[j2] = count;
                                stack.push(j2);
                            }
                        }
                    }
                }
            }
            count += 1;
        }
        for c in interventional.iter_mut().filter(|c| **c == UNSET) {
            *c = count;
            count += 1;
        }
        Components {
            outcome,
            interventional,
            count,
        }
    }

    /// Checks `T_j = P^k` for every outcome unit `j` in cluster `k`.
    pub fn check_partial_against_partition(&self, partition: &ClusterPartition) -> PartialCheck {
        let mut violations = Vec::new();
        for j in 0..self.n_outcome.min(partition.n_outcome()) {
            let row = self.rows.neighbours(j);
            let block = partition.interventional_members(partition.cluster_of_outcome(j));
            // both sorted: merge to find the symmetric difference
            let (mut a, mut b) = (0, 0);
            while a < row.len() || b < block.len() {
                match (row.get(a), block.get(b)) {
                    (Some(&x), Some(&y)) if x == y => {
                        a += 1;
                        b += 1;
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        violations.push(PartialViolation {
                            outcome: j,
                            interventional: x,
                            kind: MembershipError::Foreign,
                        });
                        a += 1;
                    }
                    (Some(&x), None) => {
                        violations.push(PartialViolation {
                            outcome: j,
                            interventional: x,
                            kind: MembershipError::Foreign,
                        });
                        a += 1;
                    }
                    (_, Some(&y)) => {
                        violations.push(PartialViolation {
                            outcome: j,
                            interventional: y,
                            kind: MembershipError::Missing,
                        });
                        b += 1;
                    }
                    (None, None) => unreachable!(),
                }
            }
        }
        PartialCheck { violations }
    }

    /// Key-associated unit per outcome unit: the member of `T_j` closest to
    /// the outcome unit by great-circle distance, lowest index on ties.
    pub fn assign_key_associated(&self, dataset: &BipartiteDataset) -> Result<KeyAssignment> {
        self.check_dataset(dataset)?;
        let mut keys = Vec::with_capacity(self.n_outcome);
        for (j, unit) in dataset.outcome().iter().enumerate() {
            let at = unit.location.ok_or_else(|| Error::MissingLocation(unit.id.clone()))?;
            let mut best: Option<(f64, usize)> = None;
            for &i in self.rows.neighbours(j) {
                let p = &dataset.interventional()[i];
                let loc = p.location.ok_or_else(|| Error::MissingLocation(p.id.clone()))?;
                let d = haversine_km(at, loc);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            keys.push(best.expect("interference sets are nonempty").1);
        }
        Ok(KeyAssignment { keys })
    }

    pub fn check_dataset(&self, dataset: &BipartiteDataset) -> Result<()> {
        if dataset.n_outcome() != self.n_outcome || dataset.n_interventional() != self.n_interventional {
            return Err(Error::InvalidDataset(format!(
                "mapping is {}x{} but dataset has {} outcome and {} interventional units",
                self.n_outcome,
                self.n_interventional,
                dataset.n_outcome(),
                dataset.n_interventional()
            )));
        }
        Ok(())
    }
}

struct Components {
    outcome: Vec<usize>,
    interventional: Vec<usize>,
    count: usize,
}

/// Key-associated interventional unit `i*(j)` for each outcome unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyAssignment {
    keys: Vec<usize>,
}

impl KeyAssignment {
    /// Validates `keys[j] ∈ T_j` for all `j`.
    pub fn new(map: &InterferenceMap, keys: Vec<usize>) -> Result<Self> {
        if keys.len() != map.n_outcome() {
            return Err(Error::InvalidDataset(format!(
                "{} keys for {} outcome units",
                keys.len(),
                map.n_outcome()
            )));
        }
        for (j, &i) in keys.iter().enumerate() {
            if !map.contains(j, i) {
                return Err(Error::NotInInterferenceSet {
                    outcome: j,
                    interventional: i,
                });
            }
        }
        Ok(Self { keys })
    }

    /// The lowest-indexed member of each interference set.
    pub fn lowest_index(map: &InterferenceMap) -> Self {
        Self {
            keys: (0..map.n_outcome()).map(|j| map.rows.neighbours(j)[0]).collect(),
        }
    }

    pub fn key(&self, j: usize) -> usize {
        self.keys[j]
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{InterventionalUnit, OutcomeUnit};
    use crate::geo::{GeoPoint, EARTH_RADIUS_KM};
    use proptest::prelude::*;

    pub(crate) const FIG_A: [&[u8]; 4] = [&[1, 0, 0], &[1, 0, 0], &[0, 1, 0], &[0, 0, 1]];
    pub(crate) const FIG_B: [&[u8]; 4] = [&[1, 1, 0], &[1, 1, 0], &[0, 0, 1], &[0, 0, 1]];
    pub(crate) const FIG_C: [&[u8]; 4] = [&[1, 1, 0], &[1, 1, 0], &[0, 1, 0], &[0, 1, 1]];

    pub(crate) fn fig(rows: [&[u8]; 4]) -> InterferenceMap {
        InterferenceMap::from_dense(&rows).unwrap()
    }

    #[test]
    fn figure_a_from_one_based_edges() {
        let edges = [(1, 1), (2, 1), (3, 2), (4, 3)].map(|(j, i)| (j - 1, i - 1));
        let m = InterferenceMap::new(4, 3, edges).unwrap();
        assert_eq!(m, fig(FIG_A));
        assert!((0..4).all(|j| m.interference_set(j).unwrap().len() == 1));
    }

    #[test]
    fn duplicates_merge_and_bounds_are_checked() {
        let m = InterferenceMap::new(1, 2, [(0, 1), (0, 0), (0, 1)]).unwrap();
        assert_eq!(m.interference_set(0).unwrap(), &[0, 1]);
        assert!(matches!(
            InterferenceMap::new(4, 3, [(4, 0)]),
            Err(Error::EdgeOutOfRange { outcome: 4, .. })
        ));
        assert_eq!(
            InterferenceMap::new(3, 1, [(0, 0)]),
            Err(Error::EmptyInterferenceSet(vec![1, 2]))
        );
    }

    #[test]
    fn figure_c_sets() {
        let m = fig(FIG_C);
        assert_eq!(m.interference_set(0).unwrap(), &[0, 1]);
        assert_eq!(m.downwind_set(1).unwrap(), &[0, 1, 2, 3]);
        assert_eq!(fig(FIG_A).downwind_set(2).unwrap(), &[3]);
        assert!(m.interference_set(4).is_err());
        assert!(m.downwind_set(3).is_err());
    }

    #[test]
    fn classification_of_the_three_figures() {
        match fig(FIG_A).classify_structure() {
            StructureClass::ClusteredNoInterference { partition: Some(p) } => assert_eq!(p.n_clusters(), 3),
            other => panic!("{other:?}"),
        }
        match fig(FIG_B).classify_structure() {
            StructureClass::PartialInterference { partition: Some(p) } => {
                assert_eq!(p.n_clusters(), 2);
                assert!(fig(FIG_B).check_partial_against_partition(&p).holds());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(fig(FIG_C).classify_structure(), StructureClass::General);
    }

    #[test]
    fn isolated_interventional_unit_has_no_induced_partition() {
        let m = InterferenceMap::new(2, 3, [(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        assert_eq!(
            m.classify_structure(),
            StructureClass::PartialInterference { partition: None }
        );
    }

    #[test]
    fn natural_partition_passes_and_merged_block_fails() {
        let b = ClusterPartition::new(vec![0, 0, 1], vec![0, 0, 1, 1], 2).unwrap();
        assert!(fig(FIG_B).check_partial_against_partition(&b).holds());
        let merged = ClusterPartition::single(3, 4).unwrap();
        let check = fig(FIG_A).check_partial_against_partition(&merged);
        assert!(!check.holds());
        assert!(check.violations.iter().all(|v| v.kind == MembershipError::Missing));
    }

    /// Every 2-block partition of P = {1,2,3} with every assignment of the
    /// four outcome units fails for the general mapping.
    #[test]
    fn figure_c_fails_every_two_block_partition() {
        let m = fig(FIG_C);
        let mut tried = 0;
        for p_mask in 1u32..7 {
            let p_labels: Vec<usize> = (0..3).map(|i| ((p_mask >> i) & 1) as usize).collect();
            if p_labels[0] == 1 {
                continue; // each unordered block pair once
            }
            for m_mask in 0u32..16 {
                let m_labels: Vec<usize> = (0..4).map(|j| ((m_mask >> j) & 1) as usize).collect();
                let Ok(part) = ClusterPartition::new(p_labels.clone(), m_labels, 2) else {
                    continue;
                };
                tried += 1;
                assert!(!m.check_partial_against_partition(&part).violations.is_empty());
            }
        }
        assert!(tried > 0);
    }

    fn located_dataset(plants: &[(f64, f64)], zips: &[(f64, f64)]) -> BipartiteDataset {
        BipartiteDataset::new(
            plants
                .iter()
                .enumerate()
                .map(|(i, &(la, lo))| InterventionalUnit {
                    id: format!("p{i}"),
                    location: Some(GeoPoint::new(la, lo).unwrap()),
                    covariates: vec![],
                    treatment: None,
                })
                .collect(),
            zips.iter()
                .enumerate()
                .map(|(j, &(la, lo))| OutcomeUnit {
                    id: format!("m{j}"),
                    location: Some(GeoPoint::new(la, lo).unwrap()),
                    covariates: vec![],
                    outcome: None,
                })
                .collect(),
        )
    }

    #[test]
    fn key_is_closest_upwind_unit() {
        let km = |d: f64| (d / EARTH_RADIUS_KM).to_degrees();
        // m0 sees p0 (10 km north) and p1 (50 km south); p2 is closer but not upwind
        let ds = located_dataset(
            &[(40.0 + km(10.0), -90.0), (40.0 - km(50.0), -90.0), (40.0, -90.001)],
            &[(40.0, -90.0), (41.0, -91.0)],
        );
        let m = InterferenceMap::new(2, 3, [(0, 0), (0, 1), (1, 2)]).unwrap();
        assert_eq!(m.assign_key_associated(&ds).unwrap().keys(), &[0, 2]);
    }

    #[test]
    fn equidistant_key_takes_lower_index() {
        let ds = located_dataset(&[(40.0, -90.5), (40.0, -89.5)], &[(40.0, -90.0)]);
        let m = InterferenceMap::new(1, 2, [(0, 1), (0, 0)]).unwrap();
        assert_eq!(m.assign_key_associated(&ds).unwrap().keys(), &[0]);
    }

    #[test]
    fn key_assignment_requires_membership() {
        let m = fig(FIG_C);
        assert!(KeyAssignment::new(&m, vec![0, 0, 1, 1]).is_ok());
        assert_eq!(
            KeyAssignment::new(&m, vec![0, 0, 0, 1]),
            Err(Error::NotInInterferenceSet {
                outcome: 2,
                interventional: 0
            })
        );
        assert_eq!(KeyAssignment::lowest_index(&m).keys(), &[0, 0, 1, 1]);
    }

    fn arb_map() -> impl Strategy<Value = InterferenceMap> {
        (1usize..7, 1usize..6).prop_flat_map(|(m, p)| {
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), p), m).prop_map(move |rows| {
                let edges: Vec<(usize, usize)> = rows
                    .iter()
                    .enumerate()
                    .flat_map(|(j, r)| {
                        let mut e: Vec<_> = r.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| (j, i)).collect();
                        if e.is_empty() {
                            e.push((j, j % p));
                        }
                        e
                    })
                    .collect();
                InterferenceMap::new(m, p, edges).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn rows_and_columns_agree(map in arb_map()) {
            for j in 0..map.n_outcome() {
                for i in 0..map.n_interventional() {
                    prop_assert_eq!(
                        map.interference_set(j).unwrap().contains(&i),
                        map.downwind_set(i).unwrap().contains(&j)
                    );
                }
            }
        }

        #[test]
        fn induced_partition_passes_the_block_check(map in arb_map()) {
            if let Some(p) = map.classify_structure().partition() {
                prop_assert!(map.check_partial_against_partition(p).holds());
            }
        }

        #[test]
        fn classification_is_permutation_invariant(
            map in arb_map(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pm: Vec<usize> = (0..map.n_outcome()).collect();
            let mut pp: Vec<usize> = (0..map.n_interventional()).collect();
            pm.shuffle(&mut rng);
            pp.shuffle(&mut rng);
            let permuted = InterferenceMap::new(
                map.n_outcome(),
                map.n_interventional(),
                map.edges().map(|(j, i)| (pm[j], pp[i])).collect::<Vec<_>>(),
            ).unwrap();
            let (a, b) = (map.classify_structure(), permuted.classify_structure());
            prop_assert_eq!(a.name(), b.name());
            prop_assert_eq!(a.partition().map(|p| p.n_clusters()), b.partition().map(|p| p.n_clusters()));
        }
    }
}
