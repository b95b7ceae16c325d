//! Ground-truth potential-outcome worlds and exact evaluation of the
//! individual, outcome-unit, key-associated and cluster-level estimands by
//! enumerating allocations.
//!
//! Nothing in the estimators reads a world; worlds exist to produce truth
//! for unbiasedness and coverage experiments.
//!
//! When an interference set is too large to enumerate, averages are
//! estimated from seeded draws of the allocation program and carry a Monte
//! Carlo standard error. Draws are shared across fixed levels, fixed units
//! and allocation probabilities (common random numbers), so contrasts are
//! estimated from paired differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{check_enumerable, AllocationStrategy, DEFAULT_ENUMERATION_CAP};
use crate::data::ClusterPartition;
use crate::error::{Error, Result};
use crate::interference::{InterferenceMap, KeyAssignment};
use crate::rng::substream;

/// Potential outcome of one outcome unit as a function of the allocation to
/// its own interference set. Position `k` of the restricted allocation is
/// the `k`-th member of the sorted set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeFunction {
    /// Explicit table indexed by the allocation's integer encoding.
    Table { values: Vec<f64> },
    /// `intercept + Σ slopes[k] a_k`
    Linear { intercept: f64, slopes: Vec<f64> },
    /// Linear plus `pairwise` per pair of treated units.
    Interactive {
        intercept: f64,
        slopes: Vec<f64>,
        pairwise: f64,
    },
    /// `baseline + effect · 1{#treated ≥ threshold}`
    Threshold {
        baseline: f64,
        effect: f64,
        threshold: usize,
    },
}

impl OutcomeFunction {
    pub fn evaluate(&self, mask: u64) -> f64 {
        let bit = |k: usize| (mask >> k) & 1 == 1;
        match self {
            OutcomeFunction::Table { values } => values[mask as usize],
            OutcomeFunction::Linear { intercept, slopes } => {
                intercept + slopes.iter().enumerate().filter(|&(k, _)| bit(k)).map(|(_, b)| b).sum::<f64>()
            }
            OutcomeFunction::Interactive {
                intercept,
                slopes,
                pairwise,
            } => {
                let treated = mask.count_ones() as f64;
                intercept
                    + slopes.iter().enumerate().filter(|&(k, _)| bit(k)).map(|(_, b)| b).sum::<f64>()
                    + pairwise * treated * (treated - 1.0) / 2.0
            }
            OutcomeFunction::Threshold {
                baseline,
                effect,
                threshold,
            } => {
                if mask.count_ones() as usize >= *threshold {
                    baseline + effect
                } else {
                    *baseline
                }
            }
        }
    }

    fn check_arity(&self, j: usize, n: usize) -> Result<()> {
        match self {
            OutcomeFunction::Table { values } => {
                if n >= 32 || values.len() != 1usize << n {
                    return Err(Error::TableSize {
                        outcome: j,
                        got: values.len(),
                        expected: if n < 64 { 1usize << n.min(63) } else { usize::MAX },
                    });
                }
            }
            OutcomeFunction::Linear { slopes, .. } | OutcomeFunction::Interactive { slopes, .. } => {
                if slopes.len() != n {
                    return Err(Error::InvalidWorld(format!(
                        "outcome unit {j}: {} slopes for an interference set of size {n}",
                        slopes.len()
                    )));
                }
            }
            OutcomeFunction::Threshold { .. } => {}
        }
        if n > 63 {
            return Err(Error::InvalidWorld(format!(
                "outcome unit {j}: interference sets above 63 units are not supported"
            )));
        }
        Ok(())
    }
}

/// A mapping together with the potential outcomes of every outcome unit.
/// Outcomes depend only on the allocation to `T_j` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldRepr", into = "WorldRepr")]
pub struct PotentialOutcomeWorld {
    mapping: InterferenceMap,
    outcomes: Vec<OutcomeFunction>,
}

#[derive(Serialize, Deserialize)]
struct WorldRepr {
    mapping: InterferenceMap,
    outcomes: Vec<OutcomeFunction>,
}

impl TryFrom<WorldRepr> for PotentialOutcomeWorld {
    type Error = Error;
    fn try_from(r: WorldRepr) -> Result<Self> {
        PotentialOutcomeWorld::new(r.mapping, r.outcomes)
    }
}

impl From<PotentialOutcomeWorld> for WorldRepr {
    fn from(w: PotentialOutcomeWorld) -> Self {
        WorldRepr {
            mapping: w.mapping,
            outcomes: w.outcomes,
        }
    }
}

impl PotentialOutcomeWorld {
    pub fn new(mapping: InterferenceMap, outcomes: Vec<OutcomeFunction>) -> Result<Self> {
        if outcomes.len() != mapping.n_outcome() {
            return Err(Error::InvalidWorld(format!(
                "{} outcome functions for {} outcome units",
                outcomes.len(),
                mapping.n_outcome()
            )));
        }
        for (j, f) in outcomes.iter().enumerate() {
            f.check_arity(j, mapping.interference_set(j)?.len())?;
        }
        Ok(Self { mapping, outcomes })
    }

    /// `Y_j(a) = intercepts[j] + Σ_{i ∈ T_j} slope(j, i) a_i`
    pub fn linear(mapping: InterferenceMap, intercepts: &[f64], slope: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let outcomes = (0..mapping.n_outcome())
            .map(|j| {
                let set = mapping.interference_set(j)?;
                Ok(OutcomeFunction::Linear {
                    intercept: intercepts[j],
                    slopes: set.iter().map(|&i| slope(j, i)).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(mapping, outcomes)
    }

    pub fn mapping(&self) -> &InterferenceMap {
        &self.mapping
    }

    pub fn outcome_function(&self, j: usize) -> &OutcomeFunction {
        &self.outcomes[j]
    }

    /// `Y_j` at the restricted allocation `mask` over `T_j`.
    pub fn outcome(&self, j: usize, mask: u64) -> f64 {
        self.outcomes[j].evaluate(mask)
    }

    /// `Y_j` at a global allocation over all interventional units.
    pub fn outcome_at(&self, j: usize, allocation: &[bool]) -> f64 {
        let set = self.mapping.interference_set(j).expect("j in range");
        let mask = set
            .iter()
            .enumerate()
            .fold(0u64, |m, (k, &i)| m | (u64::from(allocation[i]) << k));
        self.outcome(j, mask)
    }
}

/// Anything defining `Y_j` on global allocation vectors.
pub trait GlobalOutcomes {
    fn n_outcome(&self) -> usize;
    fn outcome_global(&self, j: usize, allocation: &[bool]) -> f64;
}

impl GlobalOutcomes for PotentialOutcomeWorld {
    fn n_outcome(&self) -> usize {
        self.mapping.n_outcome()
    }

    fn outcome_global(&self, j: usize, allocation: &[bool]) -> f64 {
        self.outcome_at(j, allocation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub enumeration_cap: usize,
    /// Draws per average when enumeration is infeasible.
    pub samples: usize,
    /// Required for sampling; enumeration beyond the cap errors without it.
    pub seed: Option<u64>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            samples: 10_000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimand", rename_all = "snake_case")]
pub enum Estimand {
    /// `Ȳ_j(A_i = a, α)`
    IndividualAverage { j: usize, i: usize, a: u8, alpha: f64 },
    /// `DE_(i,j)(α)`
    IndividualDirect { j: usize, i: usize, alpha: f64 },
    /// `IE^a_(i,j)(α, α')`
    IndividualIndirect {
        j: usize,
        i: usize,
        a: u8,
        alpha: f64,
        alpha_prime: f64,
    },
    /// `Ȳ_j(a, α)`
    OutcomeAverage { j: usize, a: u8, alpha: f64 },
    /// `DE_j(α)`
    OutcomeDirect { j: usize, alpha: f64 },
    /// `IE^a_j(α, α')`
    OutcomeIndirect {
        j: usize,
        a: u8,
        alpha: f64,
        alpha_prime: f64,
    },
    /// Mean over outcome units of key-associated direct effects.
    KeyDirect { alpha: f64 },
    /// Mean over outcome units of key-associated indirect effects.
    KeyIndirect { a: u8, alpha: f64, alpha_prime: f64 },
    /// `Ȳ^k(A_i* = a, α)`
    ClusterAverage { k: usize, a: u8, alpha: f64 },
    ClusterDirect { k: usize, alpha: f64 },
    ClusterIndirect {
        k: usize,
        a: u8,
        alpha: f64,
        alpha_prime: f64,
    },
    /// `Ȳ(A_i* = a, α)`
    PopulationAverage { a: u8, alpha: f64 },
    /// `DE*(α)`
    PopulationDirect { alpha: f64 },
    /// `IE^a*(α, α')`
    PopulationIndirect { a: u8, alpha: f64, alpha_prime: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandValue {
    pub value: f64,
    /// Present only when the value was estimated by sampling.
    pub mc_std_error: Option<f64>,
    pub estimand: Estimand,
}

/// An exact value or a vector of paired Monte Carlo draws.
#[derive(Debug, Clone, PartialEq)]
enum Value {
    Exact(f64),
    Draws(Vec<f64>),
}

impl Value {
    fn zip(self, other: Value, f: impl Fn(f64, f64) -> f64) -> Value {
        match (self, other) {
            (Value::Exact(a), Value::Exact(b)) => Value::Exact(f(a, b)),
            (Value::Exact(a), Value::Draws(b)) => Value::Draws(b.into_iter().map(|y| f(a, y)).collect()),
            (Value::Draws(a), Value::Exact(b)) => Value::Draws(a.into_iter().map(|x| f(x, b)).collect()),
            (Value::Draws(a), Value::Draws(b)) => Value::Draws(a.into_iter().zip(b).map(|(x, y)| f(x, y)).collect()),
        }
    }

    fn sub(self, other: Value) -> Value {
        self.zip(other, |a, b| a - b)
    }

    /// Mean of several values. Exact parts are summed in index order.
    fn mean(values: Vec<Value>) -> Value {
        let n = values.len() as f64;
        let mut iter = values.into_iter();
        let first = iter.next().expect("nonempty");
        iter.fold(first, |acc, v| acc.zip(v, |a, b| a + b)).zip(Value::Exact(n), |s, n| s / n)
    }

    fn weighted_mean(values: Vec<(f64, Value)>) -> Value {
        let total: f64 = values.iter().map(|(w, _)| w).sum();
        let mut iter = values.into_iter().map(|(w, v)| v.zip(Value::Exact(w), |x, w| x * w));
        let first = iter.next().expect("nonempty");
        iter.fold(first, |acc, v| acc.zip(v, |a, b| a + b)).zip(Value::Exact(total), |s, t| s / t)
    }

    fn finish(self, estimand: Estimand) -> EstimandValue {
        match self {
            Value::Exact(value) => EstimandValue {
                value,
                mc_std_error: None,
                estimand,
            },
            Value::Draws(d) => {
                let n = d.len() as f64;
                let mean = d.iter().sum::<f64>() / n;
                let var = if d.len() > 1 {
                    d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                EstimandValue {
                    value: mean,
                    mc_std_error: Some((var / n).sqrt()),
                    estimand,
                }
            }
        }
    }
}

fn level(a: bool) -> u8 {
    u8::from(a)
}

/// Inserts `bit` at position `pos` of `rest`.
fn insert_bit(rest: u64, pos: usize, bit: bool) -> u64 {
    let low = rest & ((1u64 << pos) - 1);
    let high = (rest >> pos) << (pos + 1);
    low | (u64::from(bit) << pos) | high
}

fn position_in_set(world: &PotentialOutcomeWorld, j: usize, i: usize) -> Result<(usize, usize)> {
    let set = world.mapping.interference_set(j)?;
    let pos = set.binary_search(&i).map_err(|_| Error::NotInInterferenceSet {
        outcome: j,
        interventional: i,
    })?;
    Ok((pos, set.len()))
}

fn avg_po(world: &PotentialOutcomeWorld, j: usize, i: usize, a: bool, strategy: &AllocationStrategy, opts: &OracleOptions) -> Result<Value> {
    let (pos, size) = position_in_set(world, j, i)?;
    let n = size - 1;
    if check_enumerable(n, opts.enumeration_cap).is_ok() {
        // centred on the modal allocation so constant outcomes and α ∈ {0, 1}
        // come out exactly
        let modal = if strategy.alpha() >= 0.5 { (1u64 << n) - 1 } else { 0 };
        let reference = world.outcome(j, insert_bit(modal, pos, a));
        let mut total = 0.0;
        for rest in 0..1u64 << n {
            let p = strategy.pi_mask(rest, n);
            if p != 0.0 {
                total += (world.outcome(j, insert_bit(rest, pos, a)) - reference) * p;
            }
        }
        return Ok(Value::Exact(reference + total));
    }
    let seed = opts.seed.ok_or(Error::EnumerationCapExceeded {
        n,
        cap: opts.enumeration_cap,
    })?;
    let alpha = strategy.alpha();
    let draws = (0..opts.samples.max(1) as u64)
        .map(|r| {
            // uniforms for all of T_j so draws are shared across fixed units
            let mut rng = substream(seed, j as u64, r);
            let mut mask = 0u64;
            for k in 0..size {
                let u: f64 = rng.random();
                if k != pos && u < alpha {
                    mask |= 1 << k;
                }
            }
            world.outcome(j, insert_bit(remove_bit(mask, pos), pos, a))
        })
        .collect();
    Ok(Value::Draws(draws))
}

fn remove_bit(mask: u64, pos: usize) -> u64 {
    let low = mask & ((1u64 << pos) - 1);
    let high = (mask >> (pos + 1)) << pos;
    low | high
}

/// `Ȳ_j(A_i = a, α) = Σ_s Y_j(A_i = a, A_(-i) = s) π(s | A_i = a; α)`
pub fn ind_avg_po(
    world: &PotentialOutcomeWorld,
    j: usize,
    i: usize,
    a: bool,
    strategy: &AllocationStrategy,
    opts: &OracleOptions,
) -> Result<EstimandValue> {
    Ok(avg_po(world, j, i, a, strategy, opts)?.finish(Estimand::IndividualAverage {
        j,
        i,
        a: level(a),
        alpha: strategy.alpha(),
    }))
}

fn de_value(world: &PotentialOutcomeWorld, j: usize, i: usize, s: &AllocationStrategy, opts: &OracleOptions) -> Result<Value> {
    Ok(avg_po(world, j, i, true, s, opts)?.sub(avg_po(world, j, i, false, s, opts)?))
}

fn ie_value(
    world: &PotentialOutcomeWorld,
    j: usize,
    i: usize,
    a: bool,
    s: &AllocationStrategy,
    s_prime: &AllocationStrategy,
    opts: &OracleOptions,
) -> Result<Value> {
    Ok(avg_po(world, j, i, a, s, opts)?.sub(avg_po(world, j, i, a, s_prime, opts)?))
}

/// `DE_(i,j)(α) = Ȳ_j(A_i = 1; α) − Ȳ_j(A_i = 0; α)`
pub fn de_ij(world: &PotentialOutcomeWorld, j: usize, i: usize, strategy: &AllocationStrategy, opts: &OracleOptions) -> Result<EstimandValue> {
    Ok(de_value(world, j, i, strategy, opts)?.finish(Estimand::IndividualDirect {
        j,
        i,
        alpha: strategy.alpha(),
    }))
}

/// `IE^a_(i,j)(α, α') = Ȳ_j(A_i = a; α) − Ȳ_j(A_i = a; α')`
pub fn ie_ij(
    world: &PotentialOutcomeWorld,
    j: usize,
    i: usize,
    a: bool,
    strategy: &AllocationStrategy,
    strategy_prime: &AllocationStrategy,
    opts: &OracleOptions,
) -> Result<EstimandValue> {
    Ok(
        ie_value(world, j, i, a, strategy, strategy_prime, opts)?.finish(Estimand::IndividualIndirect {
            j,
            i,
            a: level(a),
            alpha: strategy.alpha(),
            alpha_prime: strategy_prime.alpha(),
        }),
    )
}

fn over_set(world: &PotentialOutcomeWorld, j: usize, mut f: impl FnMut(usize) -> Result<Value>) -> Result<Value> {
    let values = world.mapping.interference_set(j)?.iter().map(|&i| f(i)).collect::<Result<Vec<_>>>()?;
    Ok(Value::mean(values))
}

/// `Ȳ_j(a, α)`: the individual average over every member of `T_j`.
pub fn m_indexed(world: &PotentialOutcomeWorld, j: usize, a: bool, strategy: &AllocationStrategy, opts: &OracleOptions) -> Result<EstimandValue> {
    Ok(over_set(world, j, |i| avg_po(world, j, i, a, strategy, opts))?.finish(Estimand::OutcomeAverage {
        j,
        a: level(a),
        alpha: strategy.alpha(),
    }))
}

/// `DE_j(α) = Ȳ_j(1, α) − Ȳ_j(0, α)`
pub fn de_j(world: &PotentialOutcomeWorld, j: usize, strategy: &AllocationStrategy, opts: &OracleOptions) -> Result<EstimandValue> {
    let y1 = over_set(world, j, |i| avg_po(world, j, i, true, strategy, opts))?;
    let y0 = over_set(world, j, |i| avg_po(world, j, i, false, strategy, opts))?;
    Ok(y1.sub(y0).finish(Estimand::OutcomeDirect {
        j,
        alpha: strategy.alpha(),
    }))
}

/// `IE^a_j(α, α') = Ȳ_j(a, α) − Ȳ_j(a, α')`
pub fn ie_j(
    world: &PotentialOutcomeWorld,
    j: usize,
    a: bool,
    strategy: &AllocationStrategy,
    strategy_prime: &AllocationStrategy,
    opts: &OracleOptions,
) -> Result<EstimandValue> {
    let y = over_set(world, j, |i| avg_po(world, j, i, a, strategy, opts))?;
    let y_prime = over_set(world, j, |i| avg_po(world, j, i, a, strategy_prime, opts))?;
    Ok(y.sub(y_prime).finish(Estimand::OutcomeIndirect {
        j,
        a: level(a),
        alpha: strategy.alpha(),
        alpha_prime: strategy_prime.alpha(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyPopulationEffects {
    pub direct: EstimandValue,
    pub indirect: EstimandValue,
}

fn check_keys(world: &PotentialOutcomeWorld, keys: &KeyAssignment) -> Result<()> {
    if keys.len() != world.mapping.n_outcome() {
        return Err(Error::InvalidWorld(format!(
            "{} keys for {} outcome units",
            keys.len(),
            world.mapping.n_outcome()
        )));
    }
    Ok(())
}

/// Means over all outcome units of `DE_(i*,j)(α)` and `IE^a_(i*,j)(α, α')`.
pub fn key_population_effects(
    world: &PotentialOutcomeWorld,
    keys: &KeyAssignment,
    a: bool,
    strategy: &AllocationStrategy,
    strategy_prime: &AllocationStrategy,
    opts: &OracleOptions,
) -> Result<KeyPopulationEffects> {
    check_keys(world, keys)?;
    let m = world.mapping.n_outcome();
    let de = (0..m).map(|j| de_value(world, j, keys.key(j), strategy, opts)).collect::<Result<Vec<_>>>()?;
    let ie = (0..m)
        .map(|j| ie_value(world, j, keys.key(j), a, strategy, strategy_prime, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(KeyPopulationEffects {
        direct: Value::mean(de).finish(Estimand::KeyDirect { alpha: strategy.alpha() }),
        indirect: Value::mean(ie).finish(Estimand::KeyIndirect {
            a: level(a),
            alpha: strategy.alpha(),
            alpha_prime: strategy_prime.alpha(),
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeighting {
    /// `1/K` per cluster.
    #[default]
    Equal,
    /// Proportional to the number of outcome units in the cluster.
    OutcomeCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffect {
    pub k: usize,
    /// `Ȳ^k(A_i* = 0, α)` and `Ȳ^k(A_i* = 1, α)`.
    pub average: [EstimandValue; 2],
    /// `Ȳ^k(A_i* = a, α')`.
    pub average_prime: EstimandValue,
    pub direct: EstimandValue,
    pub indirect: EstimandValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffects {
    pub clusters: Vec<ClusterEffect>,
    /// `Ȳ(A_i* = 0, α)` and `Ȳ(A_i* = 1, α)`.
    pub average: [EstimandValue; 2],
    pub average_prime: EstimandValue,
    pub direct: EstimandValue,
    pub indirect: EstimandValue,
}

/// Cluster-level and population-level key-associated averages and effects.
/// The mapping must be block-partial with respect to `partition`.
#[allow(clippy::too_many_arguments)]
pub fn cluster_effects(
    world: &PotentialOutcomeWorld,
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    a: bool,
    strategy: &AllocationStrategy,
    strategy_prime: &AllocationStrategy,
    weighting: ClusterWeighting,
    opts: &OracleOptions,
) -> Result<ClusterEffects> {
    check_keys(world, keys)?;
    let check = world.mapping.check_partial_against_partition(partition);
    if !check.holds() || partition.n_outcome() != world.mapping.n_outcome() {
        return Err(Error::PartialInterferenceViolation {
            n_violations: check.violations.len(),
        });
    }
    let (alpha, alpha_prime) = (strategy.alpha(), strategy_prime.alpha());
    let lvl = level(a);

    // per-cluster raw values: [y0, y1, y_a at α']
    let mut raw: Vec<[Value; 3]> = Vec::with_capacity(partition.n_clusters());
    for k in 0..partition.n_clusters() {
        let members = partition.outcome_members(k);
        let cluster_mean = |lv: bool, s: &AllocationStrategy| -> Result<Value> {
            let v = members
                .iter()
                .map(|&j| avg_po(world, j, keys.key(j), lv, s, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok(Value::mean(v))
        };
        raw.push([
            cluster_mean(false, strategy)?,
            cluster_mean(true, strategy)?,
            cluster_mean(a, strategy_prime)?,
        ]);
    }

    let mut clusters = Vec::with_capacity(raw.len());
    for (k, [y0, y1, yp]) in raw.iter().cloned().enumerate() {
        let ya = if a { y1.clone() } else { y0.clone() };
        clusters.push(ClusterEffect {
            k,
            average: [
                y0.clone().finish(Estimand::ClusterAverage { k, a: 0, alpha }),
                y1.clone().finish(Estimand::ClusterAverage { k, a: 1, alpha }),
            ],
            average_prime: yp.clone().finish(Estimand::ClusterAverage {
                k,
                a: lvl,
                alpha: alpha_prime,
            }),
            direct: y1.sub(y0).finish(Estimand::ClusterDirect { k, alpha }),
            indirect: ya.sub(yp).finish(Estimand::ClusterIndirect {
                k,
                a: lvl,
                alpha,
                alpha_prime,
            }),
        });
    }

    let weights: Vec<f64> = (0..raw.len())
        .map(|k| match weighting {
            ClusterWeighting::Equal => 1.0,
            ClusterWeighting::OutcomeCount => partition.outcome_members(k).len() as f64,
        })
        .collect();
    let combine = |f: &dyn Fn(&[Value; 3]) -> Value| -> Value {
        match weighting {
            ClusterWeighting::Equal => Value::mean(raw.iter().map(f).collect()),
            ClusterWeighting::OutcomeCount => Value::weighted_mean(weights.iter().copied().zip(raw.iter().map(f)).collect()),
        }
    };
    let y0 = combine(&|r| r[0].clone());
    let y1 = combine(&|r| r[1].clone());
    let yp = combine(&|r| r[2].clone());
    let direct = combine(&|r| r[1].clone().sub(r[0].clone()));
    let indirect = combine(&|r| {
        let ya = if a { r[1].clone() } else { r[0].clone() };
        ya.sub(r[2].clone())
    });
    Ok(ClusterEffects {
        clusters,
        average: [
            y0.finish(Estimand::PopulationAverage { a: 0, alpha }),
            y1.finish(Estimand::PopulationAverage { a: 1, alpha }),
        ],
        average_prime: yp.finish(Estimand::PopulationAverage {
            a: lvl,
            alpha: alpha_prime,
        }),
        direct: direct.finish(Estimand::PopulationDirect { alpha }),
        indirect: indirect.finish(Estimand::PopulationIndirect {
            a: lvl,
            alpha,
            alpha_prime,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SutvaMode {
    /// Every global allocation, when `P` is within the cap.
    Exhaustive { cap: usize },
    /// Random pairs agreeing on `T_j`.
    Sampled { pairs: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutvaCounterexample {
    pub outcome: usize,
    pub allocation: Vec<bool>,
    pub other: Vec<bool>,
    pub values: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutvaCheck {
    pub holds: bool,
    pub pairs_checked: usize,
    pub counterexample: Option<SutvaCounterexample>,
}

/// Checks that `Y_j(A) = Y_j(A')` whenever `A` and `A'` agree on `T_j`.
///
/// Exhaustive mode compares every global allocation with the allocation that
/// keeps `T_j` and zeroes everything else, which covers all agreeing pairs
/// by transitivity.
pub fn verify_structured_sutva(outcomes: &impl GlobalOutcomes, mapping: &InterferenceMap, mode: SutvaMode) -> Result<SutvaCheck> {
    let p = mapping.n_interventional();
    let mut pairs_checked = 0;
    let mut compare = |j: usize, x: Vec<bool>, y: Vec<bool>| -> Option<SutvaCounterexample> {
        pairs_checked += 1;
        let (vx, vy) = (outcomes.outcome_global(j, &x), outcomes.outcome_global(j, &y));
        // bitwise comparison: NaN-valued outcomes must also match
        (vx.to_bits() != vy.to_bits()).then_some(SutvaCounterexample {
            outcome: j,
            allocation: x,
            other: y,
            values: (vx, vy),
        })
    };
    for j in 0..mapping.n_outcome() {
        let set = mapping.interference_set(j)?;
        let mut in_set = vec![false; p];
        for &i in set {
            in_set[i] = true;
        }
        match mode {
            SutvaMode::Exhaustive { cap } => {
                check_enumerable(p, cap)?;
                for m in 0..1u64 << p {
                    let x: Vec<bool> = (0..p).map(|i| (m >> i) & 1 == 1).collect();
                    let y: Vec<bool> = (0..p).map(|i| x[i] && in_set[i]).collect();
                    if let Some(c) = compare(j, x, y) {
                        return Ok(SutvaCheck {
                            holds: false,
                            pairs_checked,
                            counterexample: Some(c),
                        });
                    }
                }
            }
            SutvaMode::Sampled { pairs, seed } => {
                let mut rng = substream(seed, 0x5_u64 << 32 | j as u64, 0);
                for _ in 0..pairs {
                    let x: Vec<bool> = (0..p).map(|_| rng.random()).collect();
                    let y: Vec<bool> = (0..p).map(|i| if in_set[i] { x[i] } else { rng.random() }).collect();
                    if let Some(c) = compare(j, x, y) {
                        return Ok(SutvaCheck {
                            holds: false,
                            pairs_checked,
                            counterexample: Some(c),
                        });
                    }
                }
            }
        }
    }
    Ok(SutvaCheck {
        holds: true,
        pairs_checked,
        counterexample: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::tests::{fig, FIG_A, FIG_B, FIG_C};

    fn bern(alpha: f64) -> AllocationStrategy {
        AllocationStrategy::bernoulli(alpha).unwrap()
    }

    /// `Y_j(a) = Σ_{i ∈ T_j} a_i`
    fn counting_world(rows: [&[u8]; 4]) -> PotentialOutcomeWorld {
        PotentialOutcomeWorld::linear(fig(rows), &[0.0; 4], |_, _| 1.0).unwrap()
    }

    fn exact() -> OracleOptions {
        OracleOptions::default()
    }

    #[test]
    fn individual_averages_on_figure_c() {
        let w = counting_world(FIG_C);
        let o = exact();
        assert_eq!(ind_avg_po(&w, 0, 0, true, &bern(0.5), &o).unwrap().value, 1.5);
        assert_eq!(ind_avg_po(&w, 0, 0, false, &bern(0.0), &o).unwrap().value, 0.0);
        for alpha in [0.0, 0.3, 1.0] {
            assert_eq!(ind_avg_po(&w, 2, 1, true, &bern(alpha), &o).unwrap().value, 1.0);
        }
        assert_eq!(
            ind_avg_po(&w, 2, 0, true, &bern(0.5), &o),
            Err(Error::NotInInterferenceSet {
                outcome: 2,
                interventional: 0
            })
        );
    }

    #[test]
    fn individual_effects_on_figure_c() {
        let w = counting_world(FIG_C);
        let o = exact();
        assert!((de_ij(&w, 0, 0, &bern(0.5), &o).unwrap().value - 1.0).abs() < 1e-12);
        assert!((ie_ij(&w, 0, 0, false, &bern(0.6), &bern(0.2), &o).unwrap().value - 0.4).abs() < 1e-12);
        assert_eq!(ie_ij(&w, 0, 0, true, &bern(0.35), &bern(0.35), &o).unwrap().value, 0.0);
    }

    #[test]
    fn outcome_indexed_averages() {
        let w = counting_world(FIG_C);
        let o = exact();
        assert!((de_j(&w, 0, &bern(0.3), &o).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(m_indexed(&w, 3, true, &bern(0.0), &o).unwrap().value, 1.0);
        assert_eq!(ie_j(&w, 1, true, &bern(0.4), &bern(0.4), &o).unwrap().value, 0.0);
    }

    #[test]
    fn key_effects() {
        let w = counting_world(FIG_C);
        let keys = KeyAssignment::new(w.mapping(), vec![0, 0, 1, 1]).unwrap();
        for alpha in [0.0, 0.2, 0.5, 1.0] {
            let e = key_population_effects(&w, &keys, false, &bern(alpha), &bern(alpha), &exact()).unwrap();
            assert!((e.direct.value - 1.0).abs() < 1e-12);
            assert_eq!(e.indirect.value, 0.0);
        }
        let constant = PotentialOutcomeWorld::linear(fig(FIG_C), &[3.0; 4], |_, _| 0.0).unwrap();
        let e = key_population_effects(&constant, &keys, true, &bern(0.2), &bern(0.7), &exact()).unwrap();
        assert_eq!((e.direct.value, e.indirect.value), (0.0, 0.0));
    }

    #[test]
    fn cluster_effects_on_figure_b() {
        let w = counting_world(FIG_B);
        let part = ClusterPartition::new(vec![0, 0, 1], vec![0, 0, 1, 1], 2).unwrap();
        let keys = KeyAssignment::lowest_index(w.mapping());
        let e = cluster_effects(&w, &part, &keys, true, &bern(0.5), &bern(0.1), ClusterWeighting::Equal, &exact()).unwrap();
        assert_eq!(e.clusters[0].average[1].value, 1.5);
        let mean_de = (e.clusters[0].direct.value + e.clusters[1].direct.value) / 2.0;
        assert_eq!(e.direct.value, mean_de);

        let single = ClusterPartition::single(3, 4).unwrap();
        let one = counting_world([&[1, 1, 1]; 4]);
        let keys = KeyAssignment::lowest_index(one.mapping());
        let e = cluster_effects(&one, &single, &keys, false, &bern(0.3), &bern(0.6), ClusterWeighting::Equal, &exact()).unwrap();
        assert_eq!(e.direct.value, e.clusters[0].direct.value);
        assert_eq!(e.indirect.value, e.clusters[0].indirect.value);

        let general = counting_world(FIG_C);
        assert!(matches!(
            cluster_effects(&general, &part, &KeyAssignment::lowest_index(general.mapping()), true, &bern(0.5), &bern(0.5), ClusterWeighting::Equal, &exact()),
            Err(Error::PartialInterferenceViolation { .. })
        ));
    }

    #[test]
    fn outcome_count_weighting() {
        // cluster 0: one outcome unit with Y = 1 when its plant is treated; cluster 1: three units
        let map = InterferenceMap::new(4, 2, [(0, 0), (1, 1), (2, 1), (3, 1)]).unwrap();
        let w = PotentialOutcomeWorld::linear(map, &[0.0; 4], |j, _| if j == 0 { 1.0 } else { 3.0 }).unwrap();
        let part = ClusterPartition::new(vec![0, 1], vec![0, 1, 1, 1], 2).unwrap();
        let keys = KeyAssignment::lowest_index(w.mapping());
        let eq = cluster_effects(&w, &part, &keys, true, &bern(0.5), &bern(0.5), ClusterWeighting::Equal, &exact()).unwrap();
        let wt = cluster_effects(&w, &part, &keys, true, &bern(0.5), &bern(0.5), ClusterWeighting::OutcomeCount, &exact()).unwrap();
        assert_eq!(eq.direct.value, 2.0);
        assert_eq!(wt.direct.value, 2.5);
    }

    #[test]
    fn structured_sutva_checks() {
        let w = counting_world(FIG_A);
        let check = verify_structured_sutva(&w, w.mapping(), SutvaMode::Exhaustive { cap: 20 }).unwrap();
        assert!(check.holds);
        assert_eq!(check.pairs_checked, 4 * 8);

        struct Leaky;
        impl GlobalOutcomes for Leaky {
            fn n_outcome(&self) -> usize {
                4
            }
            fn outcome_global(&self, j: usize, a: &[bool]) -> f64 {
                // outcome unit 0 reads p3, which is outside T_0 = {p1}
                if j == 0 {
                    f64::from(u8::from(a[0])) + f64::from(u8::from(a[2]))
                } else {
                    0.0
                }
            }
        }
        let check = verify_structured_sutva(&Leaky, w.mapping(), SutvaMode::Exhaustive { cap: 20 }).unwrap();
        assert!(!check.holds);
        let c = check.counterexample.unwrap();
        assert_eq!(c.outcome, 0);
        assert_eq!(c.allocation[0], c.other[0]);
        let sampled = verify_structured_sutva(&Leaky, w.mapping(), SutvaMode::Sampled { pairs: 200, seed: 1 }).unwrap();
        assert!(!sampled.holds);
    }

    #[test]
    fn degenerate_allocations_pick_a_single_potential_outcome() {
        let w = PotentialOutcomeWorld::new(
            fig(FIG_C),
            vec![
                OutcomeFunction::Table {
                    values: vec![0.5, 1.25, -2.0, 7.0],
                },
                OutcomeFunction::Interactive {
                    intercept: 1.0,
                    slopes: vec![0.3, 0.9],
                    pairwise: 2.5,
                },
                OutcomeFunction::Linear {
                    intercept: 0.1,
                    slopes: vec![4.0],
                },
                OutcomeFunction::Threshold {
                    baseline: 10.0,
                    effect: -3.0,
                    threshold: 2,
                },
            ],
        )
        .unwrap();
        for j in 0..4 {
            let set = w.mapping().interference_set(j).unwrap().to_vec();
            for (pos, &i) in set.iter().enumerate() {
                for a in [false, true] {
                    for (alpha, others) in [(0.0, 0u64), (1.0, u64::MAX)] {
                        let full = (others & ((1 << set.len()) - 1) & !(1 << pos)) | (u64::from(a) << pos);
                        let v = ind_avg_po(&w, j, i, a, &bern(alpha), &exact()).unwrap();
                        assert_eq!(v.value, w.outcome(j, full));
                    }
                }
            }
        }
    }

    #[test]
    fn bad_tables_are_rejected() {
        let bad = PotentialOutcomeWorld::new(fig(FIG_A), vec![OutcomeFunction::Table { values: vec![0.0; 3] }; 4]);
        assert!(matches!(bad, Err(Error::TableSize { outcome: 0, got: 3, expected: 2 })));
        let json = serde_json::to_string(&counting_world(FIG_B)).unwrap();
        let back: PotentialOutcomeWorld = serde_json::from_str(&json).unwrap();
        assert_eq!(back, counting_world(FIG_B));
    }

    #[test]
    fn sampling_matches_enumeration() {
        // |T_j| = 9 with a cap of 4 forces sampling
        let map = InterferenceMap::new(1, 9, (0..9).map(|i| (0, i))).unwrap();
        let w = PotentialOutcomeWorld::new(
            map,
            vec![OutcomeFunction::Interactive {
                intercept: 2.0,
                slopes: (0..9).map(|k| k as f64 * 0.5 - 1.0).collect(),
                pairwise: 0.3,
            }],
        )
        .unwrap();
        let sampled = OracleOptions {
            enumeration_cap: 4,
            samples: 20_000,
            seed: Some(42),
        };
        assert!(matches!(
            ind_avg_po(&w, 0, 3, true, &bern(0.4), &OracleOptions { seed: None, ..sampled }),
            Err(Error::EnumerationCapExceeded { .. })
        ));
        for a in [false, true] {
            let truth = ind_avg_po(&w, 0, 3, a, &bern(0.4), &exact()).unwrap();
            let est = ind_avg_po(&w, 0, 3, a, &bern(0.4), &sampled).unwrap();
            let se = est.mc_std_error.unwrap();
            assert!(se > 0.0);
            assert!((est.value - truth.value).abs() < 4.0 * se);
        }
        let truth = de_j(&w, 0, &bern(0.7), &exact()).unwrap().value;
        let est = de_j(&w, 0, &bern(0.7), &sampled).unwrap();
        assert!((est.value - truth).abs() < 4.0 * est.mc_std_error.unwrap().max(1e-12));
    }

    #[test]
    fn bit_insertion_round_trips() {
        for mask in 0u64..64 {
            for pos in 0..6 {
                let bit = (mask >> pos) & 1 == 1;
                assert_eq!(insert_bit(remove_bit(mask, pos), pos, bit), mask);
            }
        }
    }
}
