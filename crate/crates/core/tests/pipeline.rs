use bipartite_interference::geo::kmeans::kmeans;
use bipartite_interference::geo::{assign_outcome_units, within_buffer, AnalysisSample};
use bipartite_interference::iptw::{estimate_all, EstimatorConfig};
use bipartite_interference::propensity::{fit_logistic, FitOptions, PropensitySpec};
use bipartite_interference::{
    io, rng, BipartiteDataset, GeoPoint, InterferenceMap, InterventionalUnit, KeyAssignment, OutcomeUnit,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Plants around a few regional centres with covariates and treatments, and
/// outcome units scattered over the region.
fn regional_dataset(seed: u64) -> BipartiteDataset {
    let mut r = rng::substream(seed, 0, 0);
    let centres = [(39.0, -84.0), (40.5, -82.0), (38.0, -81.5), (41.0, -85.5), (37.5, -83.5), (39.8, -80.0)];
    let plants = (0..90)
        .map(|i| {
            let (la, lo) = centres[i % centres.len()];
            let w: f64 = StandardNormal.sample(&mut r);
            InterventionalUnit {
                id: format!("plant{i:03}"),
                location: Some(GeoPoint::new(la + r.random_range(-0.5..0.5), lo + r.random_range(-0.5..0.5)).unwrap()),
                covariates: vec![w, r.random_range(0.0..100.0)],
                treatment: Some(u8::from(r.random::<f64>() < 1.0 / (1.0 + (-0.8 * w).exp()))),
            }
        })
        .collect();
    let zips = (0..700)
        .map(|j| OutcomeUnit {
            id: format!("zip{j:04}"),
            location: Some(GeoPoint::new(39.2 + r.random_range(-2.5..2.5), -82.8 + r.random_range(-3.5..3.5)).unwrap()),
            covariates: vec![r.random_range(0.0..1.0)],
            outcome: Some(f64::from(r.random_range(0u32..40))),
        })
        .collect();
    BipartiteDataset::with_names(plants, zips, vec!["scrubbed".into(), "capacity".into()], vec!["smokers".into()])
}

#[test]
fn files_round_trip_through_disk() {
    let ds = regional_dataset(1);
    let dir = tempfile::tempdir().unwrap();
    let (p, m) = (dir.path().join("plants.csv"), dir.path().join("zips.csv"));
    let labels: Vec<String> = (0..ds.n_interventional()).map(|i| format!("{}", i % 6 * 10)).collect();
    io::write_interventional(std::fs::File::create(&p).unwrap(), &ds, Some(&labels)).unwrap();
    io::write_outcomes(std::fs::File::create(&m).unwrap(), &ds).unwrap();
    let loaded = io::read_dataset(&p, &m).unwrap();
    assert_eq!(loaded.dataset, ds);
    assert_eq!(loaded.clusters.as_deref(), Some(&labels[..]));
    let (idx, uniq) = io::index_labels(&labels);
    assert_eq!(uniq, ["0", "10", "20", "30", "40", "50"]);
    assert!(idx.iter().zip(&labels).all(|(&k, l)| uniq[k] == *l));
}

#[test]
fn assignment_to_estimation() {
    let ds = regional_dataset(2);
    let points: Vec<GeoPoint> = ds.interventional().iter().map(|u| u.location.unwrap()).collect();
    let clusters = kmeans(&points, 6, 100, 3);
    let assignment = assign_outcome_units(&ds, &clusters, 30.0).unwrap();

    // containment consistency
    for (j, u) in ds.outcome().iter().enumerate() {
        let p = u.location.unwrap();
        match assignment.outcome_cluster[j] {
            Some(k) => assert!(within_buffer(&assignment.geometries[k], p)),
            None => assert!(assignment.geometries.iter().all(|g| !within_buffer(g, p))),
        }
    }
    let excluded = assignment.excluded();
    assert!(!excluded.is_empty() && excluded.len() < ds.n_outcome());

    let sample = AnalysisSample::build(&ds, &clusters, &assignment.outcome_cluster).unwrap();
    assert_eq!(sample.excluded_outcomes.len(), excluded.len());
    assert_eq!(sample.dataset.n_outcome(), ds.n_outcome() - excluded.len());
    let mapping = InterferenceMap::from_partition(&sample.partition).unwrap();
    assert!(mapping.check_partial_against_partition(&sample.partition).holds());

    let spec = PropensitySpec {
        interventional_covariates: Some(vec!["scrubbed".into()]),
        outcome_covariates: vec!["smokers".into()],
        random_intercept: false,
    };
    let fit = fit_logistic(&sample.dataset, &sample.partition, &spec, &FitOptions::default()).unwrap();
    assert_eq!(fit.covariate_names, ["scrubbed", "mean(smokers)"]);
    assert!(fit.model.coefficients[1] > 0.0);

    let keys = mapping.assign_key_associated(&sample.dataset).unwrap();
    let lowest = KeyAssignment::lowest_index(&mapping);
    assert_ne!(keys, lowest);
    let config = EstimatorConfig::with_alphas(vec![0.25, 0.5, 0.75]);
    let report = estimate_all(&sample.dataset, &mapping, &sample.partition, &keys, &fit, &config).unwrap();
    assert_eq!(report.n_clusters, sample.partition.n_clusters());
    assert_eq!(report.effects.averages.len(), 6);
    assert_eq!(report.effects.direct.len(), 3);
    assert_eq!(report.effects.indirect.len(), 3);
    assert_eq!(report.contributions.len(), 6 * report.n_clusters);
    for e in report.effects.averages.iter().chain(&report.effects.direct) {
        assert!(e.point.is_finite() && e.std_error.unwrap() > 0.0);
        assert!(e.ci_low.unwrap() < e.point && e.point < e.ci_high.unwrap());
    }

    // reports serialize and reload exactly
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<bipartite_interference::iptw::EstimationReport>(&json).unwrap(), report);
    let mut csv = Vec::new();
    io::write_effects_csv(&mut csv, &report.effects).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
    let direct = text.lines().find(|l| l.starts_with("direct,,0.5,")).unwrap();
    let point: f64 = direct.split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(point, report.effects.direct[1].point);
}
