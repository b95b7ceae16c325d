//! Synthetic clustered worlds with known propensities, and Monte Carlo
//! experiments comparing the IPTW estimators with oracle truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationStrategy;
use crate::data::{BipartiteDataset, ClusterPartition, InterventionalUnit, OutcomeUnit};
use crate::error::{Error, Result};
use crate::interference::{InterferenceMap, KeyAssignment};
use crate::iptw::{effect_estimates, grid_from_parts, Estimate, EstimatorConfig};
use crate::oracle::{cluster_effects, ClusterWeighting, OracleOptions, OutcomeFunction, PotentialOutcomeWorld};
use crate::propensity::{fit_logistic, sigmoid, ClusterModel, ClusterPropensity, FitOptions, KnownPropensity, PropensitySpec, DEFAULT_QUADRATURE_NODES};
use crate::rng::substream;

const DOMAIN_SIZES: u64 = 1;
const DOMAIN_COVARIATES: u64 = 2;
const DOMAIN_WORLD: u64 = 3;
const DOMAIN_KEYS: u64 = 4;
const DOMAIN_REPLICATE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

/// Outcome-function family with parameters drawn per outcome unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WorldFamily {
    /// `c_j + Σ b_ji a_i` with `c_j ~ N(intercept, intercept_sd²)`,
    /// `b_ji ~ N(slope, slope_sd²)` plus `key_slope` for the key unit.
    Linear {
        intercept: f64,
        intercept_sd: f64,
        slope: f64,
        slope_sd: f64,
        key_slope: f64,
    },
    /// Linear plus `pairwise` per pair of treated units.
    Interactive {
        intercept: f64,
        intercept_sd: f64,
        slope: f64,
        slope_sd: f64,
        key_slope: f64,
        pairwise: f64,
    },
    /// `baseline_j + effect · 1{#treated ≥ threshold}`.
    Threshold {
        baseline: f64,
        baseline_sd: f64,
        effect: f64,
        threshold: usize,
    },
}

/// Law of the observed treatments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatmentLaw {
    /// `logit p_i = β₀ + β·W_i + σ b_k`, `b_k ~ N(0, 1)`.
    Logistic { coefficients: Vec<f64>, sd: f64 },
    /// Every unit treated with the same probability.
    Constant { probability: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DGPConfig {
    pub n_clusters: usize,
    pub interventional_size: SizeRange,
    pub outcome_size: SizeRange,
    /// Number of independent standard-normal interventional covariates.
    pub covariate_dim: usize,
    pub treatment: TreatmentLaw,
    pub world: WorldFamily,
    /// Standard deviation of the additive normal outcome noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for DGPConfig {
    fn default() -> Self {
        Self {
            n_clusters: 200,
            interventional_size: SizeRange { min: 2, max: 5 },
            outcome_size: SizeRange { min: 1, max: 4 },
            covariate_dim: 2,
            treatment: TreatmentLaw::Logistic {
                coefficients: vec![0.0, 0.5, -0.5],
                sd: 0.0,
            },
            world: WorldFamily::Linear {
                intercept: 10.0,
                intercept_sd: 1.0,
                slope: 1.0,
                slope_sd: 0.5,
                key_slope: 2.0,
            },
            noise_sd: 1.0,
            seed: 1,
        }
    }
}

impl DGPConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clusters < 2 {
            return bad(format!("at least two clusters are required, got {}", self.n_clusters));
        }
        for (name, r) in [("interventional", self.interventional_size), ("outcome", self.outcome_size)] {
            if r.min < 1 || r.min > r.max {
                return bad(format!("{name} cluster sizes must satisfy 1 <= min <= max, got {}..={}", r.min, r.max));
            }
        }
        if self.interventional_size.max > 20 {
            return bad("interventional cluster sizes above 20 are not supported".into());
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 {
            return bad(format!("noise sd must be nonnegative, got {}", self.noise_sd));
        }
        match &self.treatment {
            TreatmentLaw::Logistic { coefficients, sd } => {
                if coefficients.len() != self.covariate_dim + 1 {
                    return bad(format!(
                        "{} treatment coefficients for {} covariates plus an intercept",
                        coefficients.len(),
                        self.covariate_dim
                    ));
                }
                if sd.is_nan() || *sd < 0.0 {
                    return bad(format!("random-intercept sd must be nonnegative, got {sd}"));
                }
            }
            TreatmentLaw::Constant { probability } => {
                if !(0.0..=1.0).contains(probability) {
                    return Err(Error::InvalidAlpha(*probability));
                }
            }
        }
        Ok(())
    }
}

/// Everything generated for one synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldBundle {
    pub config: DGPConfig,
    /// Units with covariates; treatments and outcomes unobserved.
    pub dataset: BipartiteDataset,
    pub partition: ClusterPartition,
    pub mapping: InterferenceMap,
    pub keys: KeyAssignment,
    pub world: PotentialOutcomeWorld,
    pub propensity: KnownPropensity,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Builds a block-structured world (`T_j = Pᵏ` for `j ∈ Mᵏ`) with keys drawn
/// uniformly from each cluster.
pub fn generate_world(config: &DGPConfig) -> Result<WorldBundle> {
    config.validate()?;
    let seed = config.seed;
    let mut sizes = substream(seed, DOMAIN_SIZES, 0);
    let mut plant_labels = Vec::new();
    let mut zip_labels = Vec::new();
    for k in 0..config.n_clusters {
        plant_labels.extend(std::iter::repeat_n(k, config.interventional_size.draw(&mut sizes)));
        zip_labels.extend(std::iter::repeat_n(k, config.outcome_size.draw(&mut sizes)));
    }
    let partition = ClusterPartition::new(plant_labels, zip_labels, config.n_clusters)?;
    let mapping = InterferenceMap::from_partition(&partition)?;

    let mut cov = substream(seed, DOMAIN_COVARIATES, 0);
    let plants: Vec<InterventionalUnit> = (0..partition.n_interventional())
        .map(|i| InterventionalUnit {
            id: format!("p{i}"),
            location: None,
            covariates: (0..config.covariate_dim).map(|_| normal(&mut cov)).collect(),
            treatment: None,
        })
        .collect();
    let zips: Vec<OutcomeUnit> = (0..partition.n_outcome())
        .map(|j| OutcomeUnit {
            id: format!("m{j}"),
            location: None,
            covariates: vec![],
            outcome: None,
        })
        .collect();

    let mut key_rng = substream(seed, DOMAIN_KEYS, 0);
    let keys: Vec<usize> = (0..partition.n_outcome())
        .map(|j| {
            let members = partition.interventional_members(partition.cluster_of_outcome(j));
            members[key_rng.random_range(0..members.len())]
        })
        .collect();
    let keys = KeyAssignment::new(&mapping, keys)?;

    let mut wr = substream(seed, DOMAIN_WORLD, 0);
    let outcomes = (0..partition.n_outcome())
        .map(|j| {
            let set = mapping.interference_set(j)?;
            let key = keys.key(j);
            let slopes = |wr: &mut ChaCha8Rng, slope: f64, sd: f64, key_slope: f64| -> Vec<f64> {
                set.iter().map(|&i| slope + sd * normal(wr) + if i == key { key_slope } else { 0.0 }).collect()
            };
            Ok(match config.world {
                WorldFamily::Linear {
                    intercept,
                    intercept_sd,
                    slope,
                    slope_sd,
                    key_slope,
                } => OutcomeFunction::Linear {
                    intercept: intercept + intercept_sd * normal(&mut wr),
                    slopes: slopes(&mut wr, slope, slope_sd, key_slope),
                },
                WorldFamily::Interactive {
                    intercept,
                    intercept_sd,
                    slope,
                    slope_sd,
                    key_slope,
                    pairwise,
                } => OutcomeFunction::Interactive {
                    intercept: intercept + intercept_sd * normal(&mut wr),
                    slopes: slopes(&mut wr, slope, slope_sd, key_slope),
                    pairwise,
                },
                WorldFamily::Threshold {
                    baseline,
                    baseline_sd,
                    effect,
                    threshold,
                } => OutcomeFunction::Threshold {
                    baseline: baseline + baseline_sd * normal(&mut wr),
                    effect,
                    threshold,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let world = PotentialOutcomeWorld::new(mapping.clone(), outcomes)?;

    let propensity = match &config.treatment {
        TreatmentLaw::Constant { probability } => KnownPropensity::Independent {
            probabilities: vec![*probability; plants.len()],
        },
        TreatmentLaw::Logistic { coefficients, sd } => {
            let eta: Vec<f64> = plants
                .iter()
                .map(|u| coefficients[0] + u.covariates.iter().zip(&coefficients[1..]).map(|(w, b)| w * b).sum::<f64>())
                .collect();
            if *sd == 0.0 {
                KnownPropensity::Independent {
                    probabilities: eta.into_iter().map(sigmoid).collect(),
                }
            } else {
                KnownPropensity::RandomIntercept {
                    linear_predictor: eta,
                    sd: *sd,
                    nodes: DEFAULT_QUADRATURE_NODES,
                }
            }
        }
    };

    Ok(WorldBundle {
        config: config.clone(),
        dataset: BipartiteDataset::new(plants, zips),
        partition,
        mapping,
        keys,
        world,
        propensity,
    })
}

impl WorldBundle {
    /// One draw of observed treatments and noisy outcomes.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<f64>) {
        let p = self.partition.n_interventional();
        let mut treatments = vec![false; p];
        for k in 0..self.partition.n_clusters() {
            let members = self.partition.interventional_members(k);
            match &self.propensity {
                KnownPropensity::Independent { probabilities } => {
                    for &i in members {
                        treatments[i] = rng.random::<f64>() < probabilities[i];
                    }
                }
                KnownPropensity::RandomIntercept { linear_predictor, sd, .. } => {
                    let b = sd * normal(rng);
                    for &i in members {
                        treatments[i] = rng.random::<f64>() < sigmoid(linear_predictor[i] + b);
                    }
                }
            }
        }
        let noise_sd = self.config.noise_sd;
        let outcomes = (0..self.partition.n_outcome())
            .map(|j| {
                let y = self.world.outcome_at(j, &treatments);
                if noise_sd > 0.0 {
                    y + noise_sd * normal(rng)
                } else {
                    y
                }
            })
            .collect();
        (treatments, outcomes)
    }

    /// The dataset with observed treatments and outcomes filled in.
    pub fn observed(&self, treatments: &[bool], outcomes: &[f64]) -> BipartiteDataset {
        let mut ds = self.dataset.clone();
        for (u, &t) in ds.interventional_mut().iter_mut().zip(treatments) {
            u.treatment = Some(u8::from(t));
        }
        for (u, &y) in ds.outcome_mut().iter_mut().zip(outcomes) {
            u.outcome = Some(y);
        }
        ds
    }

    /// Oracle values of every estimand reported for `config`.
    pub fn truth(&self, config: &EstimatorConfig) -> Result<Vec<(Estimate, f64)>> {
        let effects = effect_template(config);
        let opts = OracleOptions::default();
        effects
            .into_iter()
            .map(|e| {
                let (a, alpha, alpha_prime) = match e {
                    Estimate::Average { a, alpha } => (a == 1, alpha, alpha),
                    Estimate::Direct { alpha } => (true, alpha, alpha),
                    Estimate::Indirect { a, alpha, alpha_prime } => (a == 1, alpha, alpha_prime),
                };
                let r = cluster_effects(
                    &self.world,
                    &self.partition,
                    &self.keys,
                    a,
                    &AllocationStrategy::bernoulli(alpha)?,
                    &AllocationStrategy::bernoulli(alpha_prime)?,
                    ClusterWeighting::Equal,
                    &opts,
                )?;
                let v = match e {
                    Estimate::Average { a, .. } => r.average[a as usize].value,
                    Estimate::Direct { .. } => r.direct.value,
                    Estimate::Indirect { .. } => r.indirect.value,
                };
                Ok((e, v))
            })
            .collect()
    }
}

/// Estimands in the order `effect_estimates` reports them.
fn effect_template(config: &EstimatorConfig) -> Vec<Estimate> {
    let mut v = Vec::new();
    for a in 0..2u8 {
        for &alpha in &config.alphas {
            v.push(Estimate::Average { a, alpha });
        }
    }
    for &alpha in &config.alphas {
        v.push(Estimate::Direct { alpha });
    }
    let pairs = config.pairs();
    for (alpha, alpha_prime) in pairs {
        v.push(Estimate::Indirect {
            a: config.indirect_level,
            alpha,
            alpha_prime,
        });
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PropensityMode {
    /// The true treatment probabilities.
    Known,
    /// Refit on every replicate.
    Fitted { spec: PropensitySpec, options: FitOptions },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub replicates: usize,
    pub seed: u64,
    pub mode: PropensityMode,
    /// Keep every replicate's point estimates in the report.
    #[serde(default)]
    pub keep_draws: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub estimand: Estimate,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    /// Monte Carlo standard error of `mean`.
    pub mc_std_error: f64,
    pub bias: f64,
    /// `bias / |truth|`; absent when the truth is zero.
    pub relative_bias: Option<f64>,
    /// Fraction of replicates whose interval covers the truth.
    pub coverage: Option<f64>,
    pub mean_std_error: Option<f64>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub dgp: DGPConfig,
    pub estimator: EstimatorConfig,
    pub options: MonteCarloOptions,
    /// Replicates whose propensity fit or estimation failed.
    pub failed_replicates: Vec<usize>,
    pub summaries: Vec<EstimandSummary>,
    /// `draws[r][e]`: point estimate of estimand `e` in successful
    /// replicate `r`, when kept.
    pub draws: Option<Vec<Vec<f64>>>,
}

impl SimulationReport {
    pub fn summary(&self, estimand: &Estimate) -> Option<&EstimandSummary> {
        self.summaries.iter().find(|s| &s.estimand == estimand)
    }
}

struct ReplicateResult {
    points: Vec<f64>,
    covered: Vec<Option<bool>>,
    std_errors: Vec<Option<f64>>,
}

fn replicate(bundle: &WorldBundle, config: &EstimatorConfig, options: &MonteCarloOptions, truth: &[(Estimate, f64)], r: usize) -> Result<ReplicateResult> {
    let mut rng = substream(options.seed, DOMAIN_REPLICATE, r as u64);
    let (treatments, outcomes) = bundle.draw(&mut rng);
    let part = &bundle.partition;
    let models: Vec<ClusterModel> = match &options.mode {
        PropensityMode::Known => (0..part.n_clusters())
            .map(|k| bundle.propensity.cluster_model(&bundle.dataset, part, k))
            .collect::<Result<_>>()?,
        PropensityMode::Fitted { spec, options: fit_options } => {
            let observed = bundle.observed(&treatments, &outcomes);
            let fit = fit_logistic(&observed, part, spec, fit_options)?;
            (0..part.n_clusters()).map(|k| fit.cluster_model(&observed, part, k)).collect::<Result<_>>()?
        }
    };
    let (grid, _, _) = grid_from_parts(part, &bundle.keys, &treatments, &outcomes, &models, config)?;
    let effects = effect_estimates(&grid, config)?;
    let all: Vec<_> = effects.averages.iter().chain(&effects.direct).chain(&effects.indirect).collect();
    debug_assert_eq!(all.len(), truth.len());
    Ok(ReplicateResult {
        points: all.iter().map(|e| e.point).collect(),
        covered: all
            .iter()
            .zip(truth)
            .map(|(e, (_, t))| e.ci_low.zip(e.ci_high).map(|(lo, hi)| lo <= *t && *t <= hi))
            .collect(),
        std_errors: all.iter().map(|e| e.std_error).collect(),
    })
}

/// Replicates drawn from the true treatment law, estimated, and summarized
/// against oracle truth. Replicate `r` uses substream `(seed, r)` regardless
/// of scheduling.
pub fn run_monte_carlo(bundle: &WorldBundle, config: &EstimatorConfig, options: &MonteCarloOptions) -> Result<SimulationReport> {
    config.validate()?;
    if options.replicates < 2 {
        return Err(Error::Config(format!("at least two replicates are required, got {}", options.replicates)));
    }
    let truth = bundle.truth(config)?;
    let results: Vec<Result<ReplicateResult>> = (0..options.replicates)
        .into_par_iter()
        .map(|r| replicate(bundle, config, options, &truth, r))
        .collect();

    let mut failed = Vec::new();
    let mut ok = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => ok.push(v),
            // a failed propensity fit is an outcome of the experiment;
            // anything else is a bug in the inputs
            Err(Error::Separation(_) | Error::NotConverged { .. } | Error::RankDeficient(_))
                if matches!(options.mode, PropensityMode::Fitted { .. }) =>
            {
                failed.push(r)
            }
            Err(e) => return Err(e),
        }
    }
    if ok.len() < 2 {
        return Err(Error::Config(format!("only {} replicates succeeded", ok.len())));
    }

    let n = ok.len() as f64;
    let summaries = truth
        .iter()
        .enumerate()
        .map(|(e, &(estimand, t))| {
            let mean = ok.iter().map(|r| r.points[e]).sum::<f64>() / n;
            let sd = (ok.iter().map(|r| (r.points[e] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let covered: Vec<bool> = ok.iter().filter_map(|r| r.covered[e]).collect();
            let ses: Vec<f64> = ok.iter().filter_map(|r| r.std_errors[e]).collect();
            let bias = mean - t;
            EstimandSummary {
                estimand,
                truth: t,
                mean,
                sd,
                mc_std_error: sd / n.sqrt(),
                bias,
                relative_bias: (t != 0.0).then(|| bias / t.abs()),
                coverage: (!covered.is_empty()).then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64),
                mean_std_error: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
                replicates: ok.len(),
            }
        })
        .collect();
    let draws = options.keep_draws.then(|| ok.iter().map(|r| r.points.clone()).collect());
    Ok(SimulationReport {
        dgp: bundle.config.clone(),
        estimator: config.clone(),
        options: options.clone(),
        failed_replicates: failed,
        summaries,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::StructureClass;
    use crate::oracle::{verify_structured_sutva, SutvaMode};

    fn small(seed: u64) -> DGPConfig {
        DGPConfig {
            n_clusters: 3,
            interventional_size: SizeRange { min: 1, max: 3 },
            outcome_size: SizeRange { min: 1, max: 2 },
            seed,
            ..DGPConfig::default()
        }
    }

    #[test]
    fn worlds_are_deterministic_and_block_partial() {
        let a = generate_world(&DGPConfig::default()).unwrap();
        let b = generate_world(&DGPConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.world, generate_world(&DGPConfig { seed: 2, ..DGPConfig::default() }).unwrap().world);
        assert!(matches!(a.mapping.classify_structure(), StructureClass::PartialInterference { .. }));
        assert!(a.mapping.check_partial_against_partition(&a.partition).holds());
        let singletons = DGPConfig {
            interventional_size: SizeRange { min: 1, max: 1 },
            ..DGPConfig::default()
        };
        let s = generate_world(&singletons).unwrap();
        assert!(matches!(s.mapping.classify_structure(), StructureClass::ClusteredNoInterference { .. }));
    }

    #[test]
    fn generated_worlds_satisfy_structured_sutva() {
        for seed in 0..5 {
            let bundle = generate_world(&small(seed)).unwrap();
            assert!(bundle.partition.n_interventional() <= 10);
            let check = verify_structured_sutva(&bundle.world, &bundle.mapping, SutvaMode::Exhaustive { cap: 20 }).unwrap();
            assert!(check.holds);
        }
    }

    #[test]
    fn noiseless_degenerate_world_is_estimated_exactly() {
        let config = DGPConfig {
            treatment: TreatmentLaw::Constant { probability: 1.0 },
            noise_sd: 0.0,
            n_clusters: 20,
            ..DGPConfig::default()
        };
        let bundle = generate_world(&config).unwrap();
        let est = EstimatorConfig::with_alphas(vec![1.0]);
        let report = run_monte_carlo(
            &bundle,
            &est,
            &MonteCarloOptions {
                replicates: 2,
                seed: 3,
                mode: PropensityMode::Known,
                keep_draws: false,
            },
        )
        .unwrap();
        let s = report.summary(&Estimate::Average { a: 1, alpha: 1.0 }).unwrap();
        assert_eq!(s.mean, s.truth);
        assert_eq!(s.sd, 0.0);
    }

    #[test]
    fn parallel_runs_are_reproducible() {
        let bundle = generate_world(&DGPConfig {
            n_clusters: 30,
            ..DGPConfig::default()
        })
        .unwrap();
        let est = EstimatorConfig::with_alphas(vec![0.4, 0.6]);
        let opts = MonteCarloOptions {
            replicates: 40,
            seed: 9,
            mode: PropensityMode::Known,
            keep_draws: true,
        };
        let a = run_monte_carlo(&bundle, &est, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_monte_carlo(&bundle, &est, &opts)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.draws.as_ref().unwrap().len(), 40);
        assert!(a.summaries.iter().all(|s| s.coverage.is_some_and(|c| (0.0..=1.0).contains(&c))));
    }

    #[test]
    fn truth_matches_linear_closed_form() {
        // block world: Ȳ_j(A_i* = a, α) = c_j + b_{j,i*} a + α Σ_{k≠i*} b_jk
        let bundle = generate_world(&DGPConfig {
            n_clusters: 5,
            ..DGPConfig::default()
        })
        .unwrap();
        let est = EstimatorConfig::with_alphas(vec![0.3]);
        let truth = bundle.truth(&est).unwrap();
        let mut cluster_means = [0.0; 5];
        for (k, mean) in cluster_means.iter_mut().enumerate() {
            let members = bundle.partition.outcome_members(k);
            for &j in members {
                let OutcomeFunction::Linear { intercept, slopes } = bundle.world.outcome_function(j) else {
                    unreachable!()
                };
                let set = bundle.mapping.interference_set(j).unwrap();
                let pos = set.iter().position(|&i| i == bundle.keys.key(j)).unwrap();
                let others: f64 = slopes.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, b)| b).sum();
                *mean += (intercept + slopes[pos] + 0.3 * others) / members.len() as f64;
            }
        }
        let expected = cluster_means.iter().sum::<f64>() / 5.0;
        let got = truth.iter().find(|(e, _)| *e == Estimate::Average { a: 1, alpha: 0.3 }).unwrap().1;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = DGPConfig {
            n_clusters: 1,
            ..DGPConfig::default()
        };
        assert!(generate_world(&c).is_err());
        c.n_clusters = 4;
        c.outcome_size = SizeRange { min: 0, max: 2 };
        assert!(generate_world(&c).is_err());
        c.outcome_size = SizeRange { min: 1, max: 2 };
        c.treatment = TreatmentLaw::Logistic {
            coefficients: vec![0.0],
            sd: 0.0,
        };
        assert!(generate_world(&c).is_err());
    }
}
