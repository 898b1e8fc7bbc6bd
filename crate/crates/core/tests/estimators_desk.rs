//! Cross-estimator agreement on simulated holdouts at desk scale, against
//! importance sampling over the whole proposal cache.

use latent_update::eval::{agreement_experiment, ExperimentConfig, Method};
use latent_update::sim::{simulate_cohort, SimConfig};

#[test]
fn alternative_estimators_track_whole_cache_importance_sampling() {
    let seed = 20_261_017;
    let cohort = simulate_cohort(&SimConfig::desk(200, seed)).unwrap().records;
    let config = ExperimentConfig {
        methods: vec![Method::IsLarge, Method::Rbis, Method::Wu],
        record_timing: false,
        ..ExperimentConfig::desk(seed)
    };
    let report = agreement_experiment(&cohort, &config).unwrap();
    assert_eq!(report.rows.len(), 20);
    for row in &report.rows {
        let is = report.results(Method::IsLarge).find(|d| d.id == row.id).unwrap();
        let rb = report.results(Method::Rbis).find(|d| d.id == row.id).unwrap();
        let (risk, se) = (is.risk.unwrap(), is.se.unwrap());
        // same target, no proposal noise
        let rb_gap = (rb.risk.unwrap() - risk).abs();
        assert!(rb_gap <= 3.0 * se, "{}: RB-IS off by {rb_gap} (se {se})", row.id);
        // slightly different targets: theta is not reweighted
        let wu_gap = (row.risk_wu.unwrap() - risk).abs();
        assert!(wu_gap <= 0.02, "{}: conditional estimate off by {wu_gap}", row.id);
    }
}
