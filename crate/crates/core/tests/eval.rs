use latent_update::eval::{
    agreement_experiment, compute_aggregates, count_inversions, decade_edges, diff_quantiles,
    ess_deviation_points, ess_deviation_table, rmsd, timing_report, AgreementReport,
    ExperimentConfig, Method,
};
use latent_update::importance::DynamicSettings;
use latent_update::mcmc::FitSettings;
use latent_update::sim::{simulate_cohort, SimConfig};
use proptest::prelude::*;

#[test]
fn rmsd_examples() {
    assert_eq!(rmsd(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
    assert!((rmsd(&[0.0, 1.0], &[0.1, 0.9]).unwrap() - 0.1).abs() < 1e-15);
    assert!(rmsd(&[], &[]).is_err());
    assert!(rmsd(&[0.1], &[0.1, 0.2]).is_err());
    assert!(rmsd(&[1.5], &[0.1]).is_err());
}

#[test]
fn quantile_examples() {
    let a = [0.1, 0.5, 0.9, 0.3];
    let b = [0.1, 0.45, 0.6, 0.3];
    assert!((diff_quantiles(&a, &b, 1.0).unwrap() - 0.3).abs() < 1e-15);
    assert_eq!(diff_quantiles(&a, &b, 0.5).unwrap(), 0.0);
    assert!((diff_quantiles(&a, &b, 0.75).unwrap() - 0.05).abs() < 1e-15);
    for q in [0.0, 0.3, 0.99, 1.0] {
        assert_eq!(diff_quantiles(&a, &a, q).unwrap(), 0.0);
    }
    assert!(diff_quantiles(&a, &b, 1.1).is_err());
}

proptest! {
    #[test]
    fn rmsd_is_symmetric_and_bounded_by_the_max(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..50)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = rmsd(&a, &b).unwrap();
        prop_assert_eq!(r, rmsd(&b, &a).unwrap());
        prop_assert!(r <= diff_quantiles(&a, &b, 1.0).unwrap() * (1.0 + 1e-12));
    }
}

#[test]
fn ess_bins_examples() {
    let points = [(50.0, 0.1), (80.0, 0.3), (5000.0, 0.02)];
    let one = ess_deviation_table(&points, &[1.0, 1e4]).unwrap();
    assert_eq!(one.len(), 1);
    assert!((one[0].mean_abs_deviation.unwrap() - 0.14).abs() < 1e-15);

    let edges = decade_edges(&points);
    assert_eq!(edges, vec![10.0, 100.0, 1000.0, 10000.0]);
    let bins = ess_deviation_table(&points, &edges).unwrap();
    assert_eq!(bins[0].count, 2);
    assert_eq!(bins[1].count, 0);
    assert_eq!(bins[1].mean_abs_deviation, None);
    assert_eq!(bins[2].mean_abs_deviation, Some(0.02));
    assert_eq!(count_inversions(&bins), 0);

    assert!(ess_deviation_table(&[], &edges).is_err());
    assert!(ess_deviation_table(&points, &[5.0, 5.0]).is_err());
}

fn small_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        holdouts: 3,
        fit: FitSettings {
            chains: 2,
            iters: 700,
            burn_in: 200,
            thin: 1,
            seed,
        },
        cache_per_draw: 10,
        dynamic: DynamicSettings {
            initial_m: 2_000,
            ess_threshold: 200.0,
            ..DynamicSettings::default()
        },
        small_budget: 500,
        record_timing: false,
        ..ExperimentConfig::desk(seed)
    }
}

#[test]
fn small_experiment_is_reproducible_and_self_consistent() {
    let cohort = simulate_cohort(&SimConfig::desk(40, 3)).unwrap().records;
    let config = small_config(11);
    let report = agreement_experiment(&cohort, &config).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.details.len(), 3 * Method::ALL.len());
    // holdouts are preferentially unlabelled
    for row in &report.rows {
        let rec = cohort.iter().find(|r| r.id == row.id).unwrap();
        assert!(rec.observed_class.is_none());
        assert!(row.risk_is.is_some() && row.risk_rs.is_some() && row.risk_wu.is_some());
        assert_eq!(row.elapsed_ms, Some(0.0));
    }
    assert_eq!(
        compute_aggregates(&report.rows, &report.details),
        report.aggregates
    );
    for agg in &report.aggregates {
        assert!(agg.rmsd.unwrap() <= agg.max_abs_diff.unwrap());
    }

    // thread count does not matter
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let again = pool
        .install(|| agreement_experiment(&cohort, &config))
        .unwrap();
    assert_eq!(report, again);

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    let back = AgreementReport::read(dir.path()).unwrap();
    assert_eq!(back, report);
    assert_eq!(
        compute_aggregates(&back.rows, &back.details),
        report.aggregates
    );
    assert_eq!(timing_report(&back), timing_report(&report));

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "id,risk_mcmc,risk_is,risk_rs,risk_wu,ess,proposals_used,elapsed_ms"
    );

    let points = ess_deviation_points(&report, &[Method::Is, Method::IsSmall, Method::IsLarge]);
    assert_eq!(points.len(), 9);
}

#[test]
fn method_subsets_leave_unrequested_columns_empty() {
    let cohort = simulate_cohort(&SimConfig::desk(30, 4)).unwrap().records;
    let config = ExperimentConfig {
        holdouts: 2,
        methods: vec![Method::Wu],
        ..small_config(5)
    };
    let report = agreement_experiment(&cohort, &config).unwrap();
    for row in &report.rows {
        assert!(row.risk_is.is_none() && row.risk_rs.is_none() && row.ess.is_none());
        assert!(row.risk_wu.is_some());
    }
    let timing = timing_report(&report);
    assert_eq!(timing.len(), 1);
    assert_eq!(timing[0].min, timing[0].max);

    assert!(agreement_experiment(
        &cohort,
        &ExperimentConfig {
            holdouts: 30,
            ..config.clone()
        }
    )
    .is_err());
    assert!(agreement_experiment(
        &cohort,
        &ExperimentConfig {
            holdouts: 0,
            ..config
        }
    )
    .is_err());
}

#[test]
fn single_row_timing_is_degenerate() {
    let cohort = simulate_cohort(&SimConfig::desk(20, 6)).unwrap().records;
    let config = ExperimentConfig {
        holdouts: 1,
        methods: vec![Method::Is],
        record_timing: true,
        ..small_config(7)
    };
    let report = agreement_experiment(&cohort, &config).unwrap();
    let t = &timing_report(&report)[0];
    assert_eq!(t.n, 1);
    assert_eq!(t.min, t.max);
    assert_eq!(t.q25, t.q75);
    assert!(t.min > 0.0);
}
