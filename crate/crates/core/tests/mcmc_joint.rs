//! Whole-sampler checks: Geweke's successive-conditional test and a
//! parameter-recovery smoke test on simulated data.

use latent_update::mcmc::{
    draw_from_prior, fit, summarize, sweep, CohortData, FitSettings, GammaProposal, GibbsState,
};
use latent_update::model::{
    sample_latents, ModelConfig, PatientRecord, PopulationParams, RecordSummary,
};
use latent_update::rng::{rng_from, SimRng};
use latent_update::sim::{
    append_observations, simulate_cohort, ObsKind, ScheduledVisit, SimConfig,
};

fn geweke_config() -> ModelConfig {
    ModelConfig {
        a_rho: 2.0,
        b_rho: 2.0,
        mu_mean: [1.0, 0.0],
        mu_sd: [1.0, 0.5],
        a_tau: 5.0,
        b_tau: 2.0,
        s_beta: 1.0,
        s_gamma: 1.5,
    }
}

fn visits() -> Vec<ScheduledVisit> {
    let mut v: Vec<_> = [0.0, 0.5, 1.0]
        .into_iter()
        .map(|time| ScheduledVisit {
            time,
            kind: ObsKind::Psa,
        })
        .collect();
    v.extend([1.0, 2.0].map(|time| ScheduledVisit {
        time,
        kind: ObsKind::Biopsy,
    }));
    v
}

const AGES: [f64; 4] = [-1.0, -0.2, 0.4, 1.1];

fn simulate_data(
    params: &PopulationParams,
    latents: &[latent_update::model::PatientLatents],
    rng: &mut SimRng,
) -> Vec<PatientRecord> {
    use rand::RngExt;
    AGES.iter()
        .zip(latents)
        .enumerate()
        .map(|(i, (&age, l))| {
            let empty = PatientRecord::empty(format!("g{i}"), age);
            append_observations(&empty, l, params, &visits(), rng.random()).unwrap()
        })
        .collect()
}

/// Mean and batch-means standard error.
fn mean_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let size = xs.len() / batches;
    let bm: Vec<f64> = xs
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let k = bm.len() as f64;
    let var = bm.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[test]
fn geweke_successive_conditional_matches_forward_simulation() {
    let cfg = geweke_config();
    let n_forward = 50_000;
    let n_chain = 200_000;

    let mut rng = rng_from(99, &[0]);
    let mut fwd_rho = Vec::with_capacity(n_forward);
    let mut fwd_sigma2 = Vec::with_capacity(n_forward);
    for _ in 0..n_forward {
        let p = draw_from_prior(&cfg, &mut rng);
        fwd_rho.push(p.rho);
        fwd_sigma2.push(p.sigma2);
    }

    let mut rng = rng_from(99, &[1]);
    let params = draw_from_prior(&cfg, &mut rng);
    let latents: Vec<_> = AGES
        .iter()
        .map(|_| sample_latents(&params, &mut rng))
        .collect();
    let mut records = simulate_data(&params, &latents, &mut rng);
    let mut state = GibbsState { params, latents };
    let mut proposal = GammaProposal::new([1.0, 1.0]);
    let mut sc_rho = Vec::with_capacity(n_chain);
    let mut sc_sigma2 = Vec::with_capacity(n_chain);
    for _ in 0..n_chain {
        let data = CohortData::new(records.iter().map(RecordSummary::of).collect());
        sweep(&data, &mut state, &cfg, &mut proposal, &mut rng).unwrap();
        records = simulate_data(&state.params, &state.latents, &mut rng);
        sc_rho.push(state.params.rho);
        sc_sigma2.push(state.params.sigma2);
    }

    let check = |name: &str, fwd: &[f64], sc: &[f64]| {
        let (mf, sf) = mean_se(fwd, 100);
        let (ms, ss) = mean_se(sc, 100);
        let z = (mf - ms) / (sf * sf + ss * ss).sqrt();
        println!("{name}: forward {mf:.5} +- {sf:.5}, conditional {ms:.5} +- {ss:.5}, z = {z:.2}");
        assert!(z.abs() < 3.0, "{name} moments disagree: z = {z}");
    };
    check("rho", &fwd_rho, &sc_rho);
    check("sigma2", &fwd_sigma2, &sc_sigma2);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    check("rho^2", &sq(&fwd_rho), &sq(&sc_rho));
}

#[test]
fn fully_labelled_cohort_keeps_labels() {
    let mut sim = SimConfig::desk(40, 21);
    sim.frac_class_observed = 1.0;
    let cohort = simulate_cohort(&sim).unwrap();
    let settings = FitSettings {
        chains: 2,
        iters: 300,
        burn_in: 100,
        thin: 2,
        seed: 5,
    };
    let sample = fit(&cohort.records, &ModelConfig::default(), &settings).unwrap();
    assert_eq!(sample.n_draws(), 200);
    for (i, id) in sample.patient_ids().iter().enumerate() {
        let rec = cohort.records.iter().find(|r| &r.id == id).unwrap();
        let label = rec.observed_class.unwrap();
        assert!(sample.patient_draws(i).iter().all(|l| l.eta == label));
    }
}

#[test]
fn fit_is_deterministic_and_order_invariant() {
    let cohort = simulate_cohort(&SimConfig::desk(30, 8)).unwrap();
    let settings = FitSettings {
        chains: 2,
        iters: 200,
        burn_in: 50,
        thin: 1,
        seed: 17,
    };
    let cfg = ModelConfig::default();
    let a = fit(&cohort.records, &cfg, &settings).unwrap();
    let mut reversed = cohort.records.clone();
    reversed.reverse();
    let b = fit(&reversed, &cfg, &settings).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.content_digest(), b.content_digest());
}

#[test]
fn fit_rejects_bad_input() {
    let cfg = ModelConfig::default();
    let settings = FitSettings::desk(1);
    assert!(fit(&[], &cfg, &settings).is_err());
    let cohort = simulate_cohort(&SimConfig::desk(3, 8)).unwrap();
    let mut dup = cohort.records.clone();
    dup.push(dup[0].clone());
    assert!(fit(&dup, &cfg, &settings).is_err());
    let bad = FitSettings {
        iters: 10,
        burn_in: 10,
        ..settings
    };
    assert!(fit(&cohort.records, &cfg, &bad).is_err());
}

#[test]
fn recovers_simulation_parameters() {
    let sim = SimConfig::desk(500, 2024);
    let cohort = simulate_cohort(&sim).unwrap();
    let sample = fit(
        &cohort.records,
        &ModelConfig::default(),
        &FitSettings::desk(7),
    )
    .unwrap();
    let truth = sim.params.to_flat();
    let summary = summarize(&sample);
    // location parameters: rho, beta_age, the four class means, gamma0, gamma1
    let checked = [
        "rho", "beta_age", "mu0_0", "mu0_1", "mu1_0", "mu1_1", "gamma0", "gamma1",
    ];
    let mut covered = 0;
    for (k, s) in summary.iter().enumerate() {
        println!(
            "{:10} truth {:8.4} mean {:8.4} [{:8.4}, {:8.4}] psr {:?}",
            s.name, truth[k], s.mean, s.q025, s.q975, s.psr
        );
        assert!(s.psr.unwrap() < 1.05, "{} has psr {:?}", s.name, s.psr);
        if checked.contains(&s.name.as_str()) && s.q025 <= truth[k] && truth[k] <= s.q975 {
            covered += 1;
        }
    }
    assert!(
        covered >= 6,
        "only {covered} of 8 inside their 95% intervals"
    );
}
