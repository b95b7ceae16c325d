use bipartite_interference::iptw::{estimate_all, Estimate, EstimatorConfig};
use bipartite_interference::oracle::{cluster_effects, ClusterWeighting, OracleOptions};
use bipartite_interference::propensity::{FitOptions, PropensitySpec};
use bipartite_interference::simulation::{
    generate_world, run_monte_carlo, DGPConfig, MonteCarloOptions, PropensityMode, TreatmentLaw,
};
use bipartite_interference::{rng, AllocationStrategy};

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn replicate_halves_agree() {
    let bundle = generate_world(&DGPConfig {
        n_clusters: 100,
        seed: 12,
        ..DGPConfig::default()
    })
    .unwrap();
    let config = EstimatorConfig::with_alphas(vec![0.4, 0.6]);
    let report = run_monte_carlo(
        &bundle,
        &config,
        &MonteCarloOptions {
            replicates: 600,
            seed: 3,
            mode: PropensityMode::Known,
            keep_draws: true,
        },
    )
    .unwrap();
    let draws = report.draws.as_ref().unwrap();
    assert_eq!(draws.len(), 600);
    for (e, summary) in report.summaries.iter().enumerate() {
        let col: Vec<f64> = draws.iter().map(|d| d[e]).collect();
        let (m1, s1) = mean_sd(&col[..300]);
        let (m2, s2) = mean_sd(&col[300..]);
        let se = (s1 * s1 / 300.0 + s2 * s2 / 300.0).sqrt();
        assert!((m1 - m2).abs() < 4.0 * se, "{:?}: halves {m1} vs {m2}, se {se}", summary.estimand);
        let (m, _) = mean_sd(&col);
        assert!((m - summary.mean).abs() < 1e-9 * m.abs().max(1.0));
    }
}

/// Mean over the average cells of `|bias|` and of its MC standard error.
fn fitted_bias(k: usize, replicates: usize) -> (f64, f64) {
    let bundle = generate_world(&DGPConfig {
        n_clusters: k,
        treatment: TreatmentLaw::Logistic {
            coefficients: vec![0.2, 1.2, -1.2],
            sd: 0.0,
        },
        seed: 21,
        ..DGPConfig::default()
    })
    .unwrap();
    let config = EstimatorConfig::with_alphas(vec![0.3, 0.7]);
    let report = run_monte_carlo(
        &bundle,
        &config,
        &MonteCarloOptions {
            replicates,
            seed: 8,
            mode: PropensityMode::Fitted {
                spec: PropensitySpec::default(),
                options: FitOptions::default(),
            },
            keep_draws: false,
        },
    )
    .unwrap();
    assert!(report.failed_replicates.is_empty(), "{} fits failed", report.failed_replicates.len());
    let cells: Vec<_> = report
        .summaries
        .iter()
        .filter(|s| matches!(s.estimand, Estimate::Average { .. }))
        .collect();
    let n = cells.len() as f64;
    (
        cells.iter().map(|s| s.bias.abs()).sum::<f64>() / n,
        cells.iter().map(|s| s.mc_std_error).sum::<f64>() / n,
    )
}

#[test]
fn fitted_propensity_bias_shrinks_with_more_clusters() {
    let (small, small_se) = fitted_bias(50, 20_000);
    let (large, large_se) = fitted_bias(500, 2_000);
    // the small-K bias must be resolved for the comparison to mean anything
    assert!(small > 3.0 * small_se, "K=50 bias {small} not resolved (se {small_se})");
    assert!(
        large < small,
        "mean |bias| K=500 {large} (se {large_se}) not below K=50 {small} (se {small_se})"
    );
}

#[test]
fn balanced_design_rarely_flags_positivity() {
    let bundle = generate_world(&DGPConfig {
        n_clusters: 400,
        treatment: TreatmentLaw::Constant { probability: 0.5 },
        seed: 17,
        ..DGPConfig::default()
    })
    .unwrap();
    let (t, y) = bundle.draw(&mut rng::substream(17, 9, 0));
    let ds = bundle.observed(&t, &y);
    let config = EstimatorConfig::with_alphas(vec![0.3, 0.5, 0.7]);
    let report = estimate_all(&ds, &bundle.mapping, &bundle.partition, &bundle.keys, &bundle.propensity, &config).unwrap();
    assert!(report.positivity.fraction_flagged() < 0.01, "{}", report.positivity.fraction_flagged());
    assert_eq!(report.n_clusters, 400);
    assert!(report.excluded_clusters.is_empty());
}

#[test]
fn single_draw_estimate_is_near_the_oracle() {
    let bundle = generate_world(&DGPConfig {
        n_clusters: 200,
        seed: 40,
        ..DGPConfig::default()
    })
    .unwrap();
    let config = EstimatorConfig::with_alphas(vec![0.5]);
    let s = AllocationStrategy::bernoulli(0.5).unwrap();
    let truth = cluster_effects(
        &bundle.world,
        &bundle.partition,
        &bundle.keys,
        true,
        &s,
        &s,
        ClusterWeighting::Equal,
        &OracleOptions::default(),
    )
    .unwrap();
    // the spread of the estimator over draws calibrates the tolerance
    let report = run_monte_carlo(
        &bundle,
        &config,
        &MonteCarloOptions {
            replicates: 400,
            seed: 41,
            mode: PropensityMode::Known,
            keep_draws: false,
        },
    )
    .unwrap();
    let (t, y) = bundle.draw(&mut rng::substream(40, 9, 0));
    let ds = bundle.observed(&t, &y);
    let est = estimate_all(&ds, &bundle.mapping, &bundle.partition, &bundle.keys, &bundle.propensity, &config).unwrap();
    let de = &est.effects.direct[0];
    let sd = report.summary(&Estimate::Direct { alpha: 0.5 }).unwrap().sd;
    assert!((de.point - truth.direct.value).abs() < 3.0 * sd, "{} vs {} (sd {sd})", de.point, truth.direct.value);
    let se = de.std_error.unwrap();
    assert!(se > 0.5 * sd && se < 2.0 * sd, "se {se} vs MC sd {sd}");
}
