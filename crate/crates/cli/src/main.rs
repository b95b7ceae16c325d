//! `bipartite`: validation, cluster assignment, propensity fitting, IPTW
//! estimation, oracle evaluation and Monte Carlo simulation from the command
//! line. Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

mod load;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bipartite_interference::allocation::AllocationStrategy;
use bipartite_interference::geo::{assign_outcome_units, DEFAULT_BUFFER_KM};
use bipartite_interference::iptw::{estimate_all, EstimationReport, EstimatorConfig};
use bipartite_interference::oracle::{self, OracleOptions, PotentialOutcomeWorld};
use bipartite_interference::propensity::{
    fit_logistic, ClusterPropensity, FitOptions, KnownPropensity, PropensityFit, PropensitySpec,
};
use bipartite_interference::simulation::{
    generate_world, run_monte_carlo, DGPConfig, MonteCarloOptions, PropensityMode, SimulationReport,
};
use bipartite_interference::{io, rng, KeyAssignment};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use load::{create, open, parse_alphas, prepare, read_json, DataArgs, KeyRule};

/// Usage errors exit with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Causal effect estimation under bipartite interference.
#[derive(Debug, Parser)]
#[command(name = "bipartite", version)]
struct Cli {
    /// Worker threads for parallel library calls (default: available parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration to stderr
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the dataset and mapping and print the mapping's structure class
    Validate(ValidateArgs),
    /// Assign outcome units to clusters of interventional units by buffered hulls
    AssignClusters(AssignArgs),
    /// Fit the cluster propensity model
    FitPropensity(FitArgs),
    /// IPTW estimates of key-associated averages and effects over an allocation grid
    Estimate(EstimateArgs),
    /// Exact estimands on a potential-outcome world
    Oracle(OracleArgs),
    /// Monte Carlo study of the estimator on synthetic worlds
    Simulate(SimulateArgs),
    /// Merge and print estimation or simulation reports
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Write the validation report as JSON
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AssignArgs {
    /// Interventional units CSV with a `cluster` column
    #[arg(long)]
    interventional: PathBuf,
    /// Outcome units CSV
    #[arg(long)]
    outcomes: PathBuf,
    /// Buffer around each cluster's convex hull, in km
    #[arg(long, default_value_t = DEFAULT_BUFFER_KM)]
    buffer_km: f64,
    /// Assignment CSV to write (outcome_id, cluster)
    #[arg(long)]
    output: PathBuf,
    /// Excluded outcome units CSV to write (outcome_id)
    #[arg(long)]
    exclusions: Option<PathBuf>,
    /// Assignment details (candidate clusters per unit) as JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    /// Interventional covariates in the model, comma-separated (default: all)
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Outcome covariates entered as cluster means, comma-separated
    #[arg(long, value_delimiter = ',')]
    outcome_covariates: Option<Vec<String>>,
    /// Add a normal cluster random intercept
    #[arg(long)]
    random_intercept: bool,
    /// Gauss-Hermite nodes for the random intercept
    #[arg(long)]
    quadrature_nodes: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, spec: &mut PropensitySpec, fit: &mut FitOptions) {
        if let Some(c) = &self.covariates {
            spec.interventional_covariates = Some(c.clone());
        }
        if let Some(c) = &self.outcome_covariates {
            spec.outcome_covariates = c.clone();
        }
        if self.random_intercept {
            spec.random_intercept = true;
        }
        if let Some(n) = self.quadrature_nodes {
            fit.quadrature_nodes = n;
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// JSON config with optional `propensity` and `fit` sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fitted model JSON to write
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON config with optional `estimator`, `propensity`, `fit` and `keys` sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Allocation grid, comma-separated (e.g. 0.1,0.2,0.3)
    #[arg(long)]
    alpha: Option<String>,
    /// Treatment level of the key unit for indirect effects
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    indirect_level: Option<u8>,
    /// Cap on per-unit weights
    #[arg(long)]
    truncate: Option<f64>,
    /// Exclude clusters whose observed treatments have zero modelled probability
    #[arg(long)]
    drop_underflow: bool,
    /// Cluster weights above this are flagged in the positivity report
    #[arg(long)]
    weight_threshold: Option<f64>,
    /// Fitted propensity JSON from fit-propensity (default: fit here)
    #[arg(long, conflicts_with = "known_propensity")]
    propensity: Option<PathBuf>,
    /// Known treatment probabilities JSON
    #[arg(long)]
    known_propensity: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Key-associated unit rule
    #[arg(long, value_enum, conflicts_with = "keys_csv")]
    keys: Option<KeyRule>,
    /// Key-associated units CSV (outcome_id, interventional_id)
    #[arg(long)]
    keys_csv: Option<PathBuf>,
    /// Full report JSON to write
    #[arg(long)]
    output: Option<PathBuf>,
    /// Effects CSV to write (default: stdout)
    #[arg(long)]
    effects_csv: Option<PathBuf>,
    /// Per-cluster contributions CSV to write
    #[arg(long)]
    contributions_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct OracleArgs {
    /// World JSON: a mapping and one outcome function per outcome unit
    #[arg(long)]
    world: PathBuf,
    /// Allocation grid, comma-separated
    #[arg(long)]
    alpha: String,
    /// Comparison allocations for indirect effects, comma-separated
    #[arg(long)]
    alpha_prime: Option<String>,
    /// Treatment level of the key unit for indirect effects
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    level: u8,
    /// 0-based key unit per outcome unit, comma-separated (default: lowest index in T_j)
    #[arg(long, value_delimiter = ',')]
    keys: Option<Vec<usize>>,
    /// Largest |T_j| - 1 evaluated by enumeration
    #[arg(long, default_value_t = OracleOptions::default().enumeration_cap)]
    enumeration_cap: usize,
    /// Draws per average beyond the enumeration cap
    #[arg(long, default_value_t = OracleOptions::default().samples)]
    samples: usize,
    /// Seed for sampling; required when some T_j exceeds the enumeration cap
    #[arg(long)]
    seed: Option<u64>,
    /// CSV to write (default: stdout)
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON report with population effects
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Known,
    Fitted,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON config with optional `dgp`, `estimator`, `replicates`, `mode` and `keep_draws`
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the world and all replicates
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    replicates: Option<usize>,
    /// Allocation grid, comma-separated
    #[arg(long)]
    alpha: Option<String>,
    /// Number of clusters
    #[arg(long)]
    clusters: Option<usize>,
    /// Outcome noise standard deviation
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Known or refitted propensity
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Report JSON to write
    #[arg(long)]
    output: Option<PathBuf>,
    /// Summary CSV to write (default: stdout)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write one observed draw as CSV inputs into this directory
    #[arg(long)]
    sample_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON files from estimate or simulate
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Merged CSV to write (default: a table on stdout)
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("error: {e}\n\nFor more information, try '--help'.");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let verbose = cli.verbose > 0;
    match cli.command {
        Command::Validate(a) => validate(&a),
        Command::AssignClusters(a) => assign_clusters(&a, verbose),
        Command::FitPropensity(a) => fit_propensity(&a, verbose),
        Command::Estimate(a) => estimate(&a, cli.threads, verbose),
        Command::Oracle(a) => run_oracle(&a, verbose),
        Command::Simulate(a) => simulate(&a, cli.threads, verbose),
        Command::Report(a) => report(&a),
    }
}

fn echo<T: Serialize>(verbose: bool, config: &T) -> Result<()> {
    if verbose {
        eprintln!("{}", serde_json::to_string_pretty(config)?);
    }
    Ok(())
}

/// Writes a CSV to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn std::io::Write) -> bipartite_interference::Result<()>) -> Result<()> {
    match path {
        Some(p) => write(&mut create(p)?)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ValidationReport {
    n_interventional: usize,
    n_outcome: usize,
    violations: Vec<String>,
    structure: Option<String>,
    n_clusters: Option<usize>,
    partial_violations: Option<usize>,
    excluded_outcomes: Vec<String>,
    dropped_clusters: Vec<String>,
}

fn validate(args: &ValidateArgs) -> Result<ExitCode> {
    let prep = prepare(&args.data)?;
    let mut violations: Vec<String> = prep.dataset.validate().iter().map(ToString::to_string).collect();
    let structure = prep.mapping.as_ref().map(|m| m.classify_structure());
    let partial_violations = match (&prep.mapping, &prep.partition, &args.data.assignment) {
        (Some(m), Some(p), Some(_)) => Some(m.check_partial_against_partition(p).violations.len()),
        _ => None,
    };
    if let Some(n) = partial_violations.filter(|&n| n > 0) {
        violations.push(format!("mapping is not block-partial for the cluster assignment ({n} violations)"));
    }
    let report = ValidationReport {
        n_interventional: prep.dataset.n_interventional(),
        n_outcome: prep.dataset.n_outcome(),
        structure: structure.as_ref().map(|s| s.name().to_string()),
        n_clusters: prep.partition.as_ref().map(|p| p.n_clusters()),
        violations,
        partial_violations,
        excluded_outcomes: prep.excluded_outcomes,
        dropped_clusters: prep.dropped_clusters,
    };
    println!("interventional units: {}", report.n_interventional);
    println!("outcome units: {}", report.n_outcome);
    if let Some(s) = &report.structure {
        println!("structure: {s}");
    }
    if let Some(k) = report.n_clusters {
        println!("clusters: {k}");
    }
    if !report.excluded_outcomes.is_empty() {
        println!("excluded outcome units: {}", report.excluded_outcomes.len());
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    if let Some(out) = &args.output {
        io::write_json(out, &report)?;
    }
    Ok(if report.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[derive(Serialize)]
struct AssignReport<'a> {
    run: &'a AssignArgs,
    n_assigned: usize,
    excluded: Vec<String>,
    candidates: Vec<(String, Vec<String>)>,
}

fn assign_clusters(args: &AssignArgs, verbose: bool) -> Result<ExitCode> {
    echo(verbose, args)?;
    if args.buffer_km.is_nan() || args.buffer_km < 0.0 {
        return Err(Usage("--buffer-km must be nonnegative".into()).into());
    }
    let loaded = io::read_dataset(&args.interventional, &args.outcomes)?;
    let Some(plant_labels) = loaded.clusters else {
        bail!("{} has no `cluster` column", args.interventional.display());
    };
    let (plant_idx, labels) = io::index_labels(&plant_labels);
    let ds = loaded.dataset;
    let result = assign_outcome_units(&ds, &plant_idx, args.buffer_km)?;
    let named: Vec<Option<String>> = result.outcome_cluster.iter().map(|c| c.map(|k| labels[k].clone())).collect();
    io::write_assignment(create(&args.output)?, &ds, &named)?;
    let excluded = result.excluded();
    if let Some(p) = &args.exclusions {
        io::write_exclusions(create(p)?, &ds, &excluded)?;
    }
    let n_assigned = ds.n_outcome() - excluded.len();
    println!("assigned {n_assigned} of {} outcome units to {} clusters", ds.n_outcome(), labels.len());
    if let Some(p) = &args.report {
        let report = AssignReport {
            run: args,
            n_assigned,
            excluded: excluded.iter().map(|&j| ds.outcome()[j].id.clone()).collect(),
            candidates: ds
                .outcome()
                .iter()
                .zip(&result.candidates)
                .map(|(u, c)| (u.id.clone(), c.iter().map(|&k| labels[k].clone()).collect()))
                .collect(),
        };
        io::write_json(p, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Sections of a JSON config file shared by fit-propensity and estimate.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EstimateFile {
    estimator: Option<EstimatorConfig>,
    propensity: Option<PropensitySpec>,
    fit: Option<FitOptions>,
    keys: Option<KeyRule>,
}

fn config_file(path: Option<&PathBuf>) -> Result<EstimateFile> {
    path.map(|p| read_json(p)).transpose().map(Option::unwrap_or_default)
}

fn check_dataset(prep: &load::Prepared) -> Result<()> {
    let violations = prep.dataset.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        bail!("dataset is invalid:\n  {}", list.join("\n  "));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FitReport {
    run: serde_json::Value,
    fit: PropensityFit,
}

fn fit_propensity(args: &FitArgs, verbose: bool) -> Result<ExitCode> {
    let file = config_file(args.config.as_ref())?;
    let mut spec = file.propensity.unwrap_or_default();
    let mut options = file.fit.unwrap_or_default();
    args.model.apply(&mut spec, &mut options);
    let run = serde_json::json!({ "command": "fit-propensity", "data": args.data, "propensity": spec, "fit": options });
    echo(verbose, &run)?;
    let prep = prepare(&args.data)?;
    check_dataset(&prep)?;
    let (_, partition) = prep.require_structure()?;
    let fit = fit_logistic(&prep.dataset, partition, &spec, &options)?;
    print_fit(&fit);
    if let Some(out) = &args.output {
        io::write_json(out, &FitReport { run, fit })?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_fit(fit: &PropensityFit) {
    println!("{:<16} {:>14} {:>14}", "term", "estimate", "std_error");
    let names = std::iter::once("(intercept)").chain(fit.covariate_names.iter().map(String::as_str));
    for (c, name) in names.enumerate() {
        println!(
            "{:<16} {:>14.6} {:>14.6}",
            name, fit.model.coefficients[c], fit.standard_errors[c]
        );
    }
    if fit.spec.random_intercept {
        let sd = fit.model.random_intercept_sd;
        let se = fit.random_intercept_sd_se.map_or(String::from("-"), |s| format!("{s:.6}"));
        println!("{:<16} {:>14.6} {:>14}", "sd(cluster)", sd, se);
    }
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    run: serde_json::Value,
    cluster_labels: &'a Option<Vec<String>>,
    excluded_outcomes: &'a [String],
    dropped_clusters: &'a [String],
    report: EstimationReport,
}

fn estimate(args: &EstimateArgs, threads: Option<usize>, verbose: bool) -> Result<ExitCode> {
    let file = config_file(args.config.as_ref())?;
    let mut config = file.estimator.unwrap_or_default();
    if let Some(a) = &args.alpha {
        config.alphas = parse_alphas(a, "--alpha")?;
    }
    if config.alphas.is_empty() {
        return Err(Usage("--alpha must list at least one value".into()).into());
    }
    if let Some(l) = args.indirect_level {
        config.indirect_level = l;
    }
    if let Some(t) = args.truncate {
        config.truncation = Some(t);
    }
    if args.drop_underflow {
        config.drop_underflow = true;
    }
    if let Some(w) = args.weight_threshold {
        config.weight_threshold = w;
    }
    config.validate().map_err(|e| Usage(e.to_string()))?;
    let mut spec = file.propensity.unwrap_or_default();
    let mut options = file.fit.unwrap_or_default();
    args.model.apply(&mut spec, &mut options);
    let key_rule = args.keys.or(file.keys).unwrap_or_default();
    let source = match (&args.propensity, &args.known_propensity) {
        (Some(p), _) => serde_json::json!({ "fitted_file": p }),
        (_, Some(p)) => serde_json::json!({ "known_file": p }),
        _ => serde_json::json!({ "fit": { "spec": spec, "options": options } }),
    };
    let run = serde_json::json!({
        "command": "estimate",
        "data": args.data,
        "estimator": config,
        "propensity": source,
        "keys": args.keys_csv.as_ref().map_or_else(|| serde_json::json!(key_rule), |p| serde_json::json!({ "file": p })),
        "threads": threads,
    });
    echo(verbose, &run)?;

    let prep = prepare(&args.data)?;
    check_dataset(&prep)?;
    let (mapping, partition) = prep.require_structure()?;
    let keys = match &args.keys_csv {
        Some(p) => io::read_keys(open(p)?, &prep.dataset, mapping)?,
        None => prep.keys(key_rule)?,
    };
    let propensity: Box<dyn ClusterPropensity> = match (&args.propensity, &args.known_propensity) {
        (Some(p), _) => Box::new(read_json::<FitReport>(p)?.fit),
        (_, Some(p)) => Box::new(read_json::<KnownPropensity>(p)?),
        _ => Box::new(fit_logistic(&prep.dataset, partition, &spec, &options)?),
    };
    let report = estimate_all(&prep.dataset, mapping, partition, &keys, propensity.as_ref(), &config)?;
    emit(args.effects_csv.as_deref(), |w| io::write_effects_csv(w, &report.effects))?;
    if let Some(p) = &args.contributions_csv {
        io::write_contributions_csv(create(p)?, &report.contributions)?;
    }
    if report.positivity.n_flagged > 0 {
        eprintln!(
            "warning: {} cluster weights exceed {}",
            report.positivity.n_flagged, report.positivity.threshold
        );
    }
    if let Some(out) = &args.output {
        let output = EstimateOutput {
            run,
            cluster_labels: &prep.cluster_labels,
            excluded_outcomes: &prep.excluded_outcomes,
            dropped_clusters: &prep.dropped_clusters,
            report,
        };
        io::write_json(out, &output)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct OracleRow {
    outcome: usize,
    key: usize,
    alpha: f64,
    alpha_prime: Option<f64>,
    y_treated: f64,
    y_control: f64,
    de_key: f64,
    ie_key: Option<f64>,
    de_outcome: f64,
    mc_std_error: Option<f64>,
}

#[derive(Serialize)]
struct OracleReport<'a> {
    run: &'a OracleArgs,
    rows: Vec<OracleRow>,
    population: Vec<oracle::KeyPopulationEffects>,
}

fn run_oracle(args: &OracleArgs, verbose: bool) -> Result<ExitCode> {
    echo(verbose, args)?;
    let alphas = parse_alphas(&args.alpha, "--alpha")?;
    let primes = args.alpha_prime.as_deref().map(|s| parse_alphas(s, "--alpha-prime")).transpose()?;
    let world: PotentialOutcomeWorld = read_json(&args.world)?;
    let mapping = world.mapping();
    let keys = match &args.keys {
        Some(k) => KeyAssignment::new(mapping, k.clone())?,
        None => KeyAssignment::lowest_index(mapping),
    };
    let opts = OracleOptions {
        enumeration_cap: args.enumeration_cap,
        samples: args.samples,
        seed: args.seed,
    };
    let needs_sampling = (0..mapping.n_outcome()).any(|j| mapping.interference_set(j).is_ok_and(|s| s.len() - 1 > opts.enumeration_cap));
    if needs_sampling && opts.seed.is_none() {
        return Err(Usage("some interference set exceeds the enumeration cap; sampling requires --seed".into()).into());
    }
    let a = args.level == 1;
    let mut rows = Vec::new();
    let mut population = Vec::new();
    for &alpha in &alphas {
        let s = AllocationStrategy::bernoulli(alpha)?;
        let comparisons: Vec<Option<f64>> = match &primes {
            Some(p) => p.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        for &alpha_prime in &comparisons {
            let s_prime = AllocationStrategy::bernoulli(alpha_prime.unwrap_or(alpha))?;
            for j in 0..mapping.n_outcome() {
                let i = keys.key(j);
                let y1 = oracle::ind_avg_po(&world, j, i, true, &s, &opts)?;
                let y0 = oracle::ind_avg_po(&world, j, i, false, &s, &opts)?;
                let de = oracle::de_ij(&world, j, i, &s, &opts)?;
                let ie = alpha_prime.map(|_| oracle::ie_ij(&world, j, i, a, &s, &s_prime, &opts)).transpose()?;
                let de_j = oracle::de_j(&world, j, &s, &opts)?;
                let se = [Some(y1), Some(y0), Some(de), ie, Some(de_j)]
                    .iter()
                    .flatten()
                    .filter_map(|v| v.mc_std_error)
                    .reduce(f64::max);
                rows.push(OracleRow {
                    outcome: j,
                    key: i,
                    alpha,
                    alpha_prime,
                    y_treated: y1.value,
                    y_control: y0.value,
                    de_key: de.value,
                    ie_key: ie.map(|v| v.value),
                    de_outcome: de_j.value,
                    mc_std_error: se,
                });
            }
            population.push(oracle::key_population_effects(&world, &keys, a, &s, &s_prime, &opts)?);
        }
    }
    emit(args.output.as_deref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &rows {
            wtr.serialize(OracleCsv::from(r))?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    if let Some(p) = &args.json {
        io::write_json(p, &OracleReport { run: args, rows, population })?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Oracle rows as text cells with round-trip float formatting.
#[derive(Serialize)]
struct OracleCsv {
    outcome: usize,
    key: usize,
    alpha: String,
    alpha_prime: String,
    y_treated: String,
    y_control: String,
    de_key: String,
    ie_key: String,
    de_outcome: String,
    mc_std_error: String,
}

impl From<&OracleRow> for OracleCsv {
    fn from(r: &OracleRow) -> Self {
        let f = io::format_f64;
        let o = |x: Option<f64>| x.map(f).unwrap_or_default();
        OracleCsv {
            outcome: r.outcome,
            key: r.key,
            alpha: f(r.alpha),
            alpha_prime: o(r.alpha_prime),
            y_treated: f(r.y_treated),
            y_control: f(r.y_control),
            de_key: f(r.de_key),
            ie_key: o(r.ie_key),
            de_outcome: f(r.de_outcome),
            mc_std_error: o(r.mc_std_error),
        }
    }
}

/// JSON config for simulate.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateFile {
    dgp: Option<DGPConfig>,
    estimator: Option<EstimatorConfig>,
    replicates: Option<usize>,
    mode: Option<PropensityMode>,
    keep_draws: Option<bool>,
}

fn simulate(args: &SimulateArgs, threads: Option<usize>, verbose: bool) -> Result<ExitCode> {
    let file: SimulateFile = args.config.as_ref().map(|p| read_json(p)).transpose()?.unwrap_or_default();
    let mut dgp = file.dgp.unwrap_or_default();
    dgp.seed = args.seed;
    if let Some(k) = args.clusters {
        dgp.n_clusters = k;
    }
    if let Some(s) = args.noise_sd {
        dgp.noise_sd = s;
    }
    let mut estimator = file.estimator.unwrap_or_else(|| EstimatorConfig::with_alphas(vec![0.3, 0.5, 0.7]));
    if let Some(a) = &args.alpha {
        estimator.alphas = parse_alphas(a, "--alpha")?;
    }
    estimator.validate().map_err(|e| Usage(e.to_string()))?;
    dgp.validate().map_err(|e| Usage(e.to_string()))?;
    let mode = match (args.mode, file.mode) {
        (Some(ModeArg::Known), _) => PropensityMode::Known,
        (Some(ModeArg::Fitted), Some(m @ PropensityMode::Fitted { .. })) => m,
        (Some(ModeArg::Fitted), _) => PropensityMode::Fitted {
            spec: PropensitySpec {
                random_intercept: matches!(dgp.treatment, bipartite_interference::simulation::TreatmentLaw::Logistic { sd, .. } if sd > 0.0),
                ..PropensitySpec::default()
            },
            options: FitOptions::default(),
        },
        (None, m) => m.unwrap_or(PropensityMode::Known),
    };
    let options = MonteCarloOptions {
        replicates: args.replicates.or(file.replicates).unwrap_or(1000),
        seed: args.seed,
        mode,
        keep_draws: file.keep_draws.unwrap_or(false),
    };
    if options.replicates < 2 {
        return Err(Usage("at least two replicates are required".into()).into());
    }
    echo(verbose, &serde_json::json!({ "dgp": dgp, "estimator": estimator, "options": options, "threads": threads }))?;
    let bundle = generate_world(&dgp)?;
    if let Some(dir) = &args.sample_dir {
        write_sample(&bundle, dir, args.seed)?;
    }
    let report = run_monte_carlo(&bundle, &estimator, &options)?;
    emit(args.csv.as_deref(), |w| io::write_simulation_csv(w, &report))?;
    if !report.failed_replicates.is_empty() {
        eprintln!("warning: {} replicates failed", report.failed_replicates.len());
    }
    if let Some(out) = &args.output {
        io::write_json(out, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Domain of the substream used for the sample written by `--sample-dir`.
const SAMPLE_DOMAIN: u64 = 6;

fn write_sample(bundle: &bipartite_interference::simulation::WorldBundle, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut rng = rng::substream(seed, SAMPLE_DOMAIN, 0);
    let (t, y) = bundle.draw(&mut rng);
    let ds = bundle.observed(&t, &y);
    let labels: Vec<String> = bundle.partition.interventional_labels().iter().map(ToString::to_string).collect();
    io::write_interventional(create(&dir.join("interventional.csv"))?, &ds, Some(&labels))?;
    io::write_outcomes(create(&dir.join("outcomes.csv"))?, &ds)?;
    io::write_edges(create(&dir.join("edges.csv"))?, &bundle.mapping, &ds)?;
    let assignment: Vec<Option<String>> = bundle
        .partition
        .outcome_labels()
        .iter()
        .map(|k| Some(k.to_string()))
        .collect();
    io::write_assignment(create(&dir.join("assignment.csv"))?, &ds, &assignment)?;
    io::write_keys(create(&dir.join("keys.csv"))?, &ds, &bundle.keys)?;
    io::write_json(&dir.join("propensity.json"), &bundle.propensity)?;
    io::write_json(&dir.join("world.json"), &bundle.world)?;
    Ok(())
}

#[derive(Deserialize)]
struct EstimateFileOut {
    report: EstimationReport,
}

enum Loaded {
    Estimation(Box<EstimationReport>),
    Simulation(Box<SimulationReport>),
}

fn load_report(path: &Path) -> Result<Loaded> {
    let value: serde_json::Value = serde_json::from_reader(std::io::BufReader::new(open(path)?))
        .with_context(|| format!("reading {}", path.display()))?;
    if value.get("summaries").is_some() {
        Ok(Loaded::Simulation(Box::new(serde_json::from_value(value)?)))
    } else if value.get("report").is_some() {
        Ok(Loaded::Estimation(Box::new(serde_json::from_value::<EstimateFileOut>(value)?.report)))
    } else {
        bail!("{} is neither an estimation nor a simulation report", path.display())
    }
}

#[derive(Serialize)]
struct MergedRow {
    source: String,
    estimand: String,
    a: String,
    alpha: String,
    alpha_prime: String,
    estimate: String,
    std_error: String,
    ci_low: String,
    ci_high: String,
    truth: String,
    coverage: String,
}

fn estimand_cells(e: &bipartite_interference::iptw::Estimate) -> (String, String, String, String) {
    use bipartite_interference::iptw::Estimate;
    let f = io::format_f64;
    match *e {
        Estimate::Average { a, alpha } => ("average".into(), a.to_string(), f(alpha), String::new()),
        Estimate::Direct { alpha } => ("direct".into(), String::new(), f(alpha), String::new()),
        Estimate::Indirect { a, alpha, alpha_prime } => ("indirect".into(), a.to_string(), f(alpha), f(alpha_prime)),
    }
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let f = io::format_f64;
    let o = |x: Option<f64>| x.map(f).unwrap_or_default();
    let mut rows = Vec::new();
    for path in &args.inputs {
        let source = path.display().to_string();
        match load_report(path)? {
            Loaded::Estimation(r) => {
                let e = &r.effects;
                for est in e.averages.iter().chain(&e.direct).chain(&e.indirect) {
                    let (estimand, a, alpha, alpha_prime) = estimand_cells(&est.estimand);
                    rows.push(MergedRow {
                        source: source.clone(),
                        estimand,
                        a,
                        alpha,
                        alpha_prime,
                        estimate: f(est.point),
                        std_error: o(est.std_error),
                        ci_low: o(est.ci_low),
                        ci_high: o(est.ci_high),
                        truth: String::new(),
                        coverage: String::new(),
                    });
                }
            }
            Loaded::Simulation(r) => {
                for s in &r.summaries {
                    let (estimand, a, alpha, alpha_prime) = estimand_cells(&s.estimand);
                    rows.push(MergedRow {
                        source: source.clone(),
                        estimand,
                        a,
                        alpha,
                        alpha_prime,
                        estimate: f(s.mean),
                        std_error: f(s.mc_std_error),
                        ci_low: String::new(),
                        ci_high: String::new(),
                        truth: f(s.truth),
                        coverage: o(s.coverage),
                    });
                }
            }
        }
    }
    match &args.csv {
        Some(p) => {
            let mut file = create(p)?;
            let mut wtr = csv::Writer::from_writer(&mut file);
            for r in &rows {
                wtr.serialize(r)?;
            }
            wtr.flush()?;
        }
        None => {
            println!(
                "{:<10} {:>2} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}",
                "estimand", "a", "alpha", "alpha'", "estimate", "std_error", "ci_low", "ci_high", "truth", "coverage"
            );
            let short = |s: &str| s.parse::<f64>().map_or(String::new(), |x| format!("{x:.4}"));
            for r in &rows {
                println!(
                    "{:<10} {:>2} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}",
                    r.estimand,
                    r.a,
                    r.alpha,
                    r.alpha_prime,
                    short(&r.estimate),
                    short(&r.std_error),
                    short(&r.ci_low),
                    short(&r.ci_high),
                    short(&r.truth),
                    short(&r.coverage)
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
