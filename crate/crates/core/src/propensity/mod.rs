//! Cluster propensity scores `f(Aᵏ | Wᵏ, Xᵏ)`: unit-level logistic regression
//! with an optional cluster random intercept, evaluation of the joint
//! probability of a cluster's observed treatment vector, and positivity
//! diagnostics.

mod irls;
mod mixed;
mod quadrature;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationStrategy;
use crate::data::{BipartiteDataset, ClusterPartition};
use crate::error::{Error, Result};
use crate::interference::KeyAssignment;

pub use quadrature::GaussHermite;

pub(crate) use irls::sigmoid;

pub const DEFAULT_QUADRATURE_NODES: usize = 21;
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 50.0;

/// Which covariates enter the model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PropensitySpec {
    /// Interventional-unit covariates by name; `None` selects all of them.
    pub interventional_covariates: Option<Vec<String>>,
    /// Outcome-unit covariates, entered as their mean over the cluster's
    /// outcome units. Empty by default.
    #[serde(default)]
    pub outcome_covariates: Vec<String>,
    #[serde(default)]
    pub random_intercept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Gradient max-norm tolerance for the fixed-effects fit.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Coefficient norm beyond which the fit is declared separated.
    pub separation_threshold: f64,
    pub quadrature_nodes: usize,
    /// Gradient max-norm tolerance for the random-intercept fit.
    pub mixed_tolerance: f64,
    pub mixed_max_iterations: usize,
    /// Starting value of the random-intercept standard deviation.
    pub initial_sd: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            separation_threshold: 1e4,
            quadrature_nodes: DEFAULT_QUADRATURE_NODES,
            mixed_tolerance: 1e-6,
            mixed_max_iterations: 1000,
            initial_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept first, then one per covariate, on the original scale.
    pub coefficients: Vec<f64>,
    /// Zero disables the random intercept.
    pub random_intercept_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub spec: PropensitySpec,
    /// Names of the design columns after the intercept.
    pub covariate_names: Vec<String>,
    pub model: LogisticModel,
    pub standardized_coefficients: Vec<f64>,
    /// Original-scale standard errors of the coefficients.
    pub standard_errors: Vec<f64>,
    pub random_intercept_sd_se: Option<f64>,
    pub standardization: Standardization,
    pub convergence: Convergence,
    pub quadrature_nodes: usize,
}

/// Column indices of the selected covariates.
struct Selection {
    w: Vec<usize>,
    x: Vec<usize>,
    names: Vec<String>,
}

fn resolve(spec: &PropensitySpec, dataset: &BipartiteDataset) -> Result<Selection> {
    let lookup = |names: &[String], wanted: &str, level: &str| {
        names
            .iter()
            .position(|n| n == wanted)
            .ok_or_else(|| Error::Config(format!("unknown {level} covariate `{wanted}`")))
    };
    let w_names = dataset.interventional_covariate_names();
    let w = match &spec.interventional_covariates {
        None => (0..w_names.len()).collect(),
        Some(list) => list.iter().map(|n| lookup(w_names, n, "interventional")).collect::<Result<Vec<_>>>()?,
    };
    let x_names = dataset.outcome_covariate_names();
    let x = spec
        .outcome_covariates
        .iter()
        .map(|n| lookup(x_names, n, "outcome"))
        .collect::<Result<Vec<_>>>()?;
    let names = w
        .iter()
        .map(|&c| w_names[c].clone())
        .chain(x.iter().map(|&c| format!("mean({})", x_names[c])))
        .collect();
    Ok(Selection { w, x, names })
}

/// Raw covariate rows for the interventional members of cluster `k`.
fn cluster_rows(sel: &Selection, dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Vec<Vec<f64>> {
    let x_means: Vec<f64> = sel
        .x
        .iter()
        .map(|&c| {
            let members = partition.outcome_members(k);
            members.iter().map(|&j| dataset.outcome()[j].covariates[c]).sum::<f64>() / members.len() as f64
        })
        .collect();
    partition
        .interventional_members(k)
        .iter()
        .map(|&i| {
            let unit = &dataset.interventional()[i];
            sel.w.iter().map(|&c| unit.covariates[c]).chain(x_means.iter().copied()).collect()
        })
        .collect()
}

fn check_inputs(dataset: &BipartiteDataset, partition: &ClusterPartition) -> Result<()> {
    partition.check_dimensions(dataset)?;
    let violations = dataset.validate();
    if let Some(v) = violations.first() {
        return Err(Error::InvalidDataset(v.to_string()));
    }
    Ok(())
}

/// Names the columns that are linear combinations of earlier ones, together
/// with the columns they combine.
fn collinear_columns(z: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<usize> = Vec::new();
    let mut flagged = std::collections::BTreeSet::new();
    for c in 0..z.ncols() {
        let col = z.column(c).into_owned();
        if basis.is_empty() {
            if col.norm() > 0.0 {
                basis.push(c);
            } else {
                flagged.insert(c);
            }
            continue;
        }
        let b = DMatrix::from_columns(&basis.iter().map(|&k| z.column(k).into_owned()).collect::<Vec<_>>());
        let coef = b.clone().svd(true, true).solve(&col, 1e-12).expect("svd with both factors");
        let resid = &col - &b * &coef;
        if resid.norm() <= 1e-8 * col.norm().max(1.0) {
            flagged.insert(c);
            for (pos, &k) in basis.iter().enumerate() {
                if coef[pos].abs() > 1e-8 {
                    flagged.insert(k);
                }
            }
        } else {
            basis.push(c);
        }
    }
    flagged.into_iter().map(|c| names[c].clone()).collect()
}

/// Fits the logistic propensity model to the observed treatments.
pub fn fit_logistic(dataset: &BipartiteDataset, partition: &ClusterPartition, spec: &PropensitySpec, options: &FitOptions) -> Result<PropensityFit> {
    check_inputs(dataset, partition)?;
    let sel = resolve(spec, dataset)?;
    let treatments = dataset.observed_treatments()?;
    let n = treatments.len();
    let n_treated = treatments.iter().filter(|&&t| t).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::Separation(format!(
            "{n_treated} of {n} interventional units are treated; both levels are required"
        )));
    }

    let mut raw = vec![Vec::new(); n];
    let mut clusters = Vec::with_capacity(partition.n_clusters());
    for k in 0..partition.n_clusters() {
        let members = partition.interventional_members(k);
        for (&i, row) in members.iter().zip(cluster_rows(&sel, dataset, partition, k)) {
            raw[i] = row;
        }
        clusters.push(members.to_vec());
    }

    let d = sel.names.len();
    let mut means = vec![0.0; d];
    let mut scales = vec![0.0; d];
    for c in 0..d {
        let mean = raw.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n as f64;
        means[c] = mean;
        scales[c] = var.sqrt();
    }
    let mut names = vec!["(intercept)".to_string()];
    names.extend(sel.names.iter().cloned());
    let constant: Vec<String> = (0..d).filter(|&c| scales[c].is_nan() || scales[c] <= 1e-12 * means[c].abs().max(1.0)).map(|c| sel.names[c].clone()).collect();
    if !constant.is_empty() {
        let mut cols = vec!["(intercept)".to_string()];
        cols.extend(constant);
        return Err(Error::RankDeficient(cols));
    }
    let z = DMatrix::from_fn(n, d + 1, |r, c| if c == 0 { 1.0 } else { (raw[r][c - 1] - means[c - 1]) / scales[c - 1] });
    let collinear = collinear_columns(&z, &names);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }
    let y: Vec<f64> = treatments.iter().map(|&t| f64::from(u8::from(t))).collect();

    let fixed = irls::irls(&z, &y, options)?;
    let (beta_std, cov_std, sd, sd_se, convergence) = if spec.random_intercept {
        let rule = GaussHermite::new(options.quadrature_nodes)?;
        let objective = |theta: &DVector<f64>| {
            let (ll, g) = mixed::marginal(&z, &y, &clusters, &rule, theta);
            (-ll, -g)
        };
        let mut theta0 = DVector::zeros(d + 2);
        theta0.rows_mut(0, d + 1).copy_from(&fixed.beta);
        theta0[d + 1] = options.initial_sd;
        let opt = mixed::bfgs(objective, theta0, options.mixed_tolerance, options.mixed_max_iterations)?;
        if opt.x.rows(0, d + 1).norm() > options.separation_threshold {
            return Err(Error::Separation("random-intercept coefficients diverged".into()));
        }
        let hess = mixed::numerical_hessian(objective, &opt.x);
        let cov = hess.try_inverse().unwrap_or_else(|| DMatrix::from_element(d + 2, d + 2, f64::NAN));
        let sd = opt.x[d + 1].abs();
        let sd_se = cov[(d + 1, d + 1)].sqrt();
        (
            opt.x.rows(0, d + 1).into_owned(),
            cov.view((0, 0), (d + 1, d + 1)).into_owned(),
            sd,
            Some(sd_se),
            Convergence {
                iterations: opt.iterations,
                gradient_norm: opt.gradient_norm,
                log_likelihood: -opt.value,
            },
        )
    } else {
        (
            fixed.beta.clone(),
            fixed.covariance.clone(),
            0.0,
            None,
            Convergence {
                iterations: fixed.iterations,
                gradient_norm: fixed.gradient_norm,
                log_likelihood: fixed.log_likelihood,
            },
        )
    };

    // β_orig = J β_std
    let mut jac = DMatrix::<f64>::identity(d + 1, d + 1);
    for c in 0..d {
        jac[(c + 1, c + 1)] = 1.0 / scales[c];
        jac[(0, c + 1)] = -means[c] / scales[c];
    }
    let beta = &jac * &beta_std;
    let cov = &jac * cov_std * jac.transpose();

    Ok(PropensityFit {
        spec: spec.clone(),
        covariate_names: sel.names,
        model: LogisticModel {
            coefficients: beta.iter().copied().collect(),
            random_intercept_sd: sd,
        },
        standardized_coefficients: beta_std.iter().copied().collect(),
        standard_errors: (0..=d).map(|c| cov[(c, c)].sqrt()).collect(),
        random_intercept_sd_se: sd_se,
        standardization: Standardization { means, scales },
        convergence,
        quadrature_nodes: options.quadrature_nodes,
    })
}

/// Fixed-effects log-likelihood of the observed treatments and its analytic
/// score, at original-scale `coefficients` (intercept first).
pub fn logistic_log_likelihood(
    dataset: &BipartiteDataset,
    partition: &ClusterPartition,
    spec: &PropensitySpec,
    coefficients: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_inputs(dataset, partition)?;
    let sel = resolve(spec, dataset)?;
    if coefficients.len() != sel.names.len() + 1 {
        return Err(Error::Config(format!(
            "{} coefficients for {} design columns",
            coefficients.len(),
            sel.names.len() + 1
        )));
    }
    let treatments = dataset.observed_treatments()?;
    let mut raw = vec![Vec::new(); treatments.len()];
    for k in 0..partition.n_clusters() {
        for (&i, row) in partition.interventional_members(k).iter().zip(cluster_rows(&sel, dataset, partition, k)) {
            raw[i] = row;
        }
    }
    let z = DMatrix::from_fn(raw.len(), coefficients.len(), |r, c| if c == 0 { 1.0 } else { raw[r][c - 1] });
    let y: Vec<f64> = treatments.iter().map(|&t| f64::from(u8::from(t))).collect();
    let beta = DVector::from_column_slice(coefficients);
    Ok((irls::log_likelihood(&z, &y, &beta), irls::score(&z, &y, &beta).iter().copied().collect()))
}

/// The treatment model of one cluster's interventional units, in member order.
#[derive(Debug, Clone, PartialEq)]
pub enum ClusterModel {
    /// Independent treatments with the given probabilities.
    Probabilities(Vec<f64>),
    /// Logistic with linear predictors `eta` and a shared `N(0, sd²)`
    /// intercept integrated with `nodes` quadrature points.
    Logistic { eta: Vec<f64>, sd: f64, nodes: usize },
}

impl ClusterModel {
    /// `ln f(Aᵏ)`. `-inf` when the vector has probability zero.
    pub fn log_probability(&self, treatments: &[bool]) -> Result<f64> {
        match self {
            ClusterModel::Probabilities(p) => Ok(p
                .iter()
                .zip(treatments)
                .map(|(&p, &t)| if t { p.ln() } else { (1.0 - p).ln() })
                .sum()),
            ClusterModel::Logistic { eta, sd, nodes } => {
                if *sd == 0.0 {
                    return Ok(eta
                        .iter()
                        .zip(treatments)
                        .map(|(&e, &t)| if t { -irls::softplus(-e) } else { -irls::softplus(e) })
                        .sum());
                }
                let rule = GaussHermite::new(*nodes)?;
                Ok(mixed::cluster_log_marginal(eta, treatments, *sd, &rule))
            }
        }
    }
}

/// Anything that yields the treatment model of a cluster.
pub trait ClusterPropensity: Send + Sync {
    fn cluster_model(&self, dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Result<ClusterModel>;
}

impl PropensityFit {
    /// Linear predictors (without the random intercept) of cluster `k`'s
    /// interventional units.
    pub fn linear_predictors(&self, dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Result<Vec<f64>> {
        partition.check_cluster(k)?;
        let sel = resolve(&self.spec, dataset)?;
        if sel.names != self.covariate_names {
            return Err(Error::Config(format!(
                "dataset covariates {:?} do not match the fitted model's {:?}",
                sel.names, self.covariate_names
            )));
        }
        let beta = &self.model.coefficients;
        Ok(cluster_rows(&sel, dataset, partition, k)
            .iter()
            .map(|row| beta[0] + row.iter().zip(&beta[1..]).map(|(x, b)| x * b).sum::<f64>())
            .collect())
    }

    /// Fitted unit probabilities at a zero random intercept.
    pub fn unit_probabilities(&self, dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Result<Vec<f64>> {
        Ok(self.linear_predictors(dataset, partition, k)?.into_iter().map(irls::sigmoid).collect())
    }
}

impl ClusterPropensity for PropensityFit {
    fn cluster_model(&self, dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Result<ClusterModel> {
        Ok(ClusterModel::Logistic {
            eta: self.linear_predictors(dataset, partition, k)?,
            sd: self.model.random_intercept_sd,
            nodes: self.quadrature_nodes,
        })
    }
}

/// True treatment probabilities, bypassing estimation. Vectors are indexed by
/// interventional unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnownPropensity {
    Independent { probabilities: Vec<f64> },
    RandomIntercept { linear_predictor: Vec<f64>, sd: f64, nodes: usize },
}

impl ClusterPropensity for KnownPropensity {
    fn cluster_model(&self, _dataset: &BipartiteDataset, partition: &ClusterPartition, k: usize) -> Result<ClusterModel> {
        partition.check_cluster(k)?;
        let members = partition.interventional_members(k);
        let pick = |v: &[f64]| -> Result<Vec<f64>> {
            members
                .iter()
                .map(|&i| v.get(i).copied().ok_or(Error::IndexOutOfRange { index: i, len: v.len() }))
                .collect()
        };
        Ok(match self {
            KnownPropensity::Independent { probabilities } => ClusterModel::Probabilities(pick(probabilities)?),
            KnownPropensity::RandomIntercept {
                linear_predictor,
                sd,
                nodes,
            } => ClusterModel::Logistic {
                eta: pick(linear_predictor)?,
                sd: *sd,
                nodes: *nodes,
            },
        })
    }
}

/// `ln f(Aᵏ | Wᵏ, Xᵏ)` for the treatment vector of cluster `k` given in
/// member order.
pub fn cluster_log_probability(
    propensity: &dyn ClusterPropensity,
    dataset: &BipartiteDataset,
    partition: &ClusterPartition,
    k: usize,
    treatments: &[bool],
) -> Result<f64> {
    let model = propensity.cluster_model(dataset, partition, k)?;
    if treatments.len() != partition.interventional_members(k).len() {
        return Err(Error::Config(format!(
            "cluster {k} has {} interventional units, got {} treatments",
            partition.interventional_members(k).len(),
            treatments.len()
        )));
    }
    model.log_probability(treatments)
}

pub fn cluster_joint_probability(
    propensity: &dyn ClusterPropensity,
    dataset: &BipartiteDataset,
    partition: &ClusterPartition,
    k: usize,
    treatments: &[bool],
) -> Result<f64> {
    Ok(cluster_log_probability(propensity, dataset, partition, k, treatments)?.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityWeight {
    pub alpha: f64,
    /// `π(Aᵏ; α) / f(Aᵏ)` over the whole cluster.
    pub cluster_weight: f64,
    /// Largest per-outcome-unit estimator weight `π(Aᵏ₍₋ᵢ*₎; α) / f(Aᵏ)`.
    pub max_unit_weight: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPositivity {
    pub k: usize,
    pub log_propensity: f64,
    pub weights: Vec<PositivityWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub threshold: f64,
    pub clusters: Vec<ClusterPositivity>,
    /// Clusters flagged at any allocation probability.
    pub n_flagged: usize,
}

impl PositivityReport {
    pub fn fraction_flagged(&self) -> f64 {
        self.n_flagged as f64 / self.clusters.len().max(1) as f64
    }
}

/// Realized IPTW weights of every cluster at every allocation strategy, with
/// cluster weights above `threshold` flagged.
pub fn positivity_diagnostics(
    propensity: &dyn ClusterPropensity,
    dataset: &BipartiteDataset,
    partition: &ClusterPartition,
    keys: &KeyAssignment,
    strategies: &[AllocationStrategy],
    threshold: f64,
) -> Result<PositivityReport> {
    let treatments = dataset.observed_treatments()?;
    let mut clusters = Vec::with_capacity(partition.n_clusters());
    for k in 0..partition.n_clusters() {
        let members = partition.interventional_members(k);
        let a: Vec<bool> = members.iter().map(|&i| treatments[i]).collect();
        let log_f = cluster_log_probability(propensity, dataset, partition, k, &a)?;
        let weights = strategies
            .iter()
            .map(|s| {
                let log_pi = s.log_pi(a.iter().copied());
                let cluster_weight = (log_pi - log_f).exp();
                let max_unit_weight = partition
                    .outcome_members(k)
                    .iter()
                    .map(|&j| {
                        let key = keys.key(j);
                        let rest = members.iter().zip(&a).filter(|&(&i, _)| i != key).map(|(_, &t)| t);
                        (s.log_pi(rest) - log_f).exp()
                    })
                    .fold(0.0, f64::max);
                PositivityWeight {
                    alpha: s.alpha(),
                    cluster_weight,
                    max_unit_weight,
                    flagged: cluster_weight > threshold,
                }
            })
            .collect();
        clusters.push(ClusterPositivity {
            k,
            log_propensity: log_f,
            weights,
        });
    }
    let n_flagged = clusters.iter().filter(|c| c.weights.iter().any(|w| w.flagged)).count();
    Ok(PositivityReport {
        threshold,
        clusters,
        n_flagged,
    })
}
