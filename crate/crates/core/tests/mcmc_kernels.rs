mod common;

use latent_update::mcmc::{
    draw_beta_age, draw_mu, draw_rho, draw_sigma2, draw_tau2, gamma_log_target, step_gamma,
    update_patient_block, CohortData, GammaProposal,
};
use latent_update::model::{
    log_latent_density, log_obs_likelihood, ModelConfig, PatientLatents, PatientRecord,
    RecordSummary,
};
use latent_update::rng::rng_from;
use latent_update::sim::{simulate_cohort, SimConfig};
use statrs::distribution::{Beta, ContinuousCDF, Gamma, Normal};

use common::{ks_statistic, toy_params, toy_record, trapezoid_2d};

const KS_DRAWS: usize = 10_000;
const KS_MAX: f64 = 0.02;

fn frozen_state(n: usize, seed: u64) -> (Vec<PatientRecord>, Vec<PatientLatents>) {
    let mut cfg = SimConfig::desk(n, seed);
    cfg.frac_class_observed = 0.0;
    let c = simulate_cohort(&cfg).unwrap();
    (c.records, c.truth)
}

fn data_of(records: &[PatientRecord]) -> CohortData {
    CohortData::new(records.iter().map(RecordSummary::of).collect())
}

/// Upper-tail CDF of InvGamma(a, b) at x equals P(Gamma(a, rate=b) >= 1/x).
fn inv_gamma_cdf(a: f64, b: f64, x: f64) -> f64 {
    1.0 - Gamma::new(a, b).unwrap().cdf(1.0 / x)
}

#[test]
fn rho_conditional_matches_beta_closed_form() {
    let (_, latents) = frozen_state(120, 1);
    let cfg = ModelConfig::default();
    let ones = latents.iter().filter(|l| l.eta == 1).count() as f64;
    let n = latents.len() as f64;
    let oracle = Beta::new(1.0 + ones, 1.0 + n - ones).unwrap();
    let mut rng = rng_from(10, &[]);
    let mut draws: Vec<f64> = (0..KS_DRAWS)
        .map(|_| draw_rho(&latents, &cfg, &mut rng))
        .collect();
    let ks = ks_statistic(&mut draws, |x| oracle.cdf(x));
    assert!(ks < KS_MAX, "KS {ks}");
}

#[test]
fn mu_conditional_matches_gaussian_closed_form() {
    let (_, latents) = frozen_state(150, 2);
    let cfg = ModelConfig::default();
    let p = toy_params();
    for c in 0..2 {
        for d in 0..2 {
            let us: Vec<f64> = latents
                .iter()
                .filter(|l| usize::from(l.eta) == c)
                .map(|l| l.u[d])
                .collect();
            let prec = cfg.mu_sd[d].powi(-2) + us.len() as f64 / p.tau2[c][d];
            let mean = (cfg.mu_mean[d] * cfg.mu_sd[d].powi(-2)
                + us.iter().sum::<f64>() / p.tau2[c][d])
                / prec;
            let oracle = Normal::new(mean, prec.sqrt().recip()).unwrap();
            let mut rng = rng_from(11, &[c as u64, d as u64]);
            let mut draws: Vec<f64> = (0..KS_DRAWS)
                .map(|_| draw_mu(c, d, &latents, &p, &cfg, &mut rng))
                .collect();
            let ks = ks_statistic(&mut draws, |x| oracle.cdf(x));
            assert!(ks < KS_MAX, "mu[{c}][{d}] KS {ks}");
        }
    }
}

#[test]
fn empty_class_draws_mu_from_prior() {
    let latents: Vec<PatientLatents> = (0..30)
        .map(|_| PatientLatents {
            eta: 0,
            u: [1.0, 0.1],
        })
        .collect();
    let cfg = ModelConfig {
        mu_mean: [0.5, -0.5],
        mu_sd: [2.0, 3.0],
        ..ModelConfig::default()
    };
    for d in 0..2 {
        let oracle = Normal::new(cfg.mu_mean[d], cfg.mu_sd[d]).unwrap();
        let mut rng = rng_from(12, &[d as u64]);
        let mut draws: Vec<f64> = (0..KS_DRAWS)
            .map(|_| draw_mu(1, d, &latents, &toy_params(), &cfg, &mut rng))
            .collect();
        let ks = ks_statistic(&mut draws, |x| oracle.cdf(x));
        assert!(ks < KS_MAX, "KS {ks}");
    }
}

#[test]
fn tau2_conditional_matches_inverse_gamma_closed_form() {
    let (_, latents) = frozen_state(150, 3);
    let cfg = ModelConfig::default();
    let p = toy_params();
    for c in 0..2 {
        for d in 0..2 {
            let ss: Vec<f64> = latents
                .iter()
                .filter(|l| usize::from(l.eta) == c)
                .map(|l| (l.u[d] - p.mu[c][d]).powi(2))
                .collect();
            let a = cfg.a_tau + 0.5 * ss.len() as f64;
            let b = cfg.b_tau + 0.5 * ss.iter().sum::<f64>();
            let mut rng = rng_from(13, &[c as u64, d as u64]);
            let mut draws: Vec<f64> = (0..KS_DRAWS)
                .map(|_| draw_tau2(c, d, &latents, &p, &cfg, &mut rng))
                .collect();
            let ks = ks_statistic(&mut draws, |x| inv_gamma_cdf(a, b, x));
            assert!(ks < KS_MAX, "tau2[{c}][{d}] KS {ks}");
        }
    }
}

#[test]
fn sigma2_conditional_matches_inverse_gamma_closed_form() {
    let (records, latents) = frozen_state(80, 4);
    let cfg = ModelConfig::default();
    let p = toy_params();
    // direct residual sum, independent of the summary statistics
    let mut n = 0.0;
    let mut rss = 0.0;
    for (r, l) in records.iter().zip(&latents) {
        for o in &r.psa {
            let e = o.value - p.beta_age * r.age_std - l.u[0] - l.u[1] * o.time;
            rss += e * e;
            n += 1.0;
        }
    }
    let (a, b) = (cfg.a_tau + 0.5 * n, cfg.b_tau + 0.5 * rss);
    let data = data_of(&records);
    let mut rng = rng_from(14, &[]);
    let mut draws: Vec<f64> = (0..KS_DRAWS)
        .map(|_| draw_sigma2(&data, &latents, &p, &cfg, &mut rng))
        .collect();
    let ks = ks_statistic(&mut draws, |x| inv_gamma_cdf(a, b, x));
    assert!(ks < KS_MAX, "KS {ks}");
}

#[test]
fn beta_age_conditional_matches_gaussian_closed_form() {
    let (records, latents) = frozen_state(80, 5);
    let cfg = ModelConfig::default();
    let p = toy_params();
    let mut xx = 0.0;
    let mut xy = 0.0;
    for (r, l) in records.iter().zip(&latents) {
        for o in &r.psa {
            xx += r.age_std * r.age_std;
            xy += r.age_std * (o.value - l.u[0] - l.u[1] * o.time);
        }
    }
    let prec = cfg.s_beta.powi(-2) + xx / p.sigma2;
    let oracle = Normal::new(xy / p.sigma2 / prec, prec.sqrt().recip()).unwrap();
    let data = data_of(&records);
    let mut rng = rng_from(15, &[]);
    let mut draws: Vec<f64> = (0..KS_DRAWS)
        .map(|_| draw_beta_age(&data, &latents, &p, &cfg, &mut rng))
        .collect();
    let ks = ks_statistic(&mut draws, |x| oracle.cdf(x));
    assert!(ks < KS_MAX, "KS {ks}");
}

#[test]
fn random_effect_conditional_matches_quadrature_moments() {
    let p = toy_params();
    let rec = toy_record();
    let s = RecordSummary::of(&rec);
    for eta in 0..2u8 {
        let c = usize::from(eta);
        let sd = p.tau2[c].map(f64::sqrt);
        let lo = [p.mu[c][0] - 9.0 * sd[0], p.mu[c][1] - 9.0 * sd[1]];
        let hi = [p.mu[c][0] + 9.0 * sd[0], p.mu[c][1] + 9.0 * sd[1]];
        let q = trapezoid_2d(lo, hi, 401, |u0, u1| {
            let l = PatientLatents { eta, u: [u0, u1] };
            log_obs_likelihood(&rec, &l, &p).unwrap() + log_latent_density(&l, &p).unwrap()
        });
        let g = s.random_effect_conditional(eta, &p);
        for d in 0..2 {
            assert!((g.mean[d] - q.mean[d]).abs() < 1e-3, "mean {d}");
            for e in 0..2 {
                assert!((g.cov[d][e] - q.cov[d][e]).abs() < 1e-3, "cov {d}{e}");
            }
        }
        // a tighter check than the stated tolerance: the algebra is exact
        assert!((g.mean[1] - q.mean[1]).abs() < 1e-7);
    }
}

#[test]
fn patient_block_without_data_draws_class_from_prevalence() {
    let mut p = toy_params();
    p.mu[0] = p.mu[1];
    p.tau2[0] = p.tau2[1];
    let s = RecordSummary::of(&PatientRecord::empty("x", 0.0));
    assert!((s.class_probability(&p) - p.rho).abs() < 1e-15);
    let mut rng = rng_from(16, &[]);
    let n = 20_000;
    let ones = (0..n)
        .filter(|_| update_patient_block(&s, &p, &mut rng).eta == 1)
        .count() as f64;
    let se = (p.rho * (1.0 - p.rho) / n as f64).sqrt();
    assert!((ones / n as f64 - p.rho).abs() < 3.0 * se);
}

#[test]
fn huge_residual_variance_recovers_prior_effects() {
    let mut p = toy_params();
    p.sigma2 = 1e12;
    let rec = PatientRecord {
        observed_class: Some(1),
        ..toy_record()
    };
    let s = RecordSummary::of(&rec);
    let mut rng = rng_from(17, &[]);
    let n = 20_000;
    let draws: Vec<[f64; 2]> = (0..n)
        .map(|_| update_patient_block(&s, &p, &mut rng).u)
        .collect();
    for d in 0..2 {
        let m = draws.iter().map(|u| u[d]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|u| (u[d] - m).powi(2)).sum::<f64>() / n as f64;
        let tau2 = p.tau2[1][d];
        assert!((m - p.mu[1][d]).abs() < 3.0 * (tau2 / n as f64).sqrt());
        assert!((v / tau2 - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }
}

#[test]
fn observed_class_is_never_resampled() {
    let p = toy_params();
    let rec = PatientRecord {
        observed_class: Some(0),
        ..toy_record()
    };
    let s = RecordSummary::of(&rec);
    let mut rng = rng_from(18, &[]);
    assert!((0..1000).all(|_| update_patient_block(&s, &p, &mut rng).eta == 0));
}

#[test]
fn zero_scale_gamma_step_stays_put() {
    let cfg = ModelConfig::default();
    let counts = [(3.0, 20.0), (6.0, 10.0)];
    let mut prop = GammaProposal::new([0.0, 0.0]);
    let mut rng = rng_from(19, &[]);
    let mut g = [-1.3, 0.7];
    for _ in 0..100 {
        g = step_gamma(g, &counts, &cfg, &mut prop, &mut rng);
    }
    assert_eq!(g, [-1.3, 0.7]);
}

#[test]
fn gamma_random_walk_targets_its_posterior() {
    // Long run against a 2-D grid of the same unnormalized target.
    let cfg = ModelConfig::default();
    let counts = [(4.0, 40.0), (9.0, 15.0)];
    let mut prop = GammaProposal::new([0.4, 0.4]);
    let mut rng = rng_from(20, &[]);
    let mut g = [-1.0, 1.0];
    let n = 200_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        g = step_gamma(g, &counts, &cfg, &mut prop, &mut rng);
        sum[0] += g[0];
        sum[1] += g[1];
    }
    let q = trapezoid_2d([-6.0, 0.0], [2.0, 6.0], 801, |a, b| {
        gamma_log_target([a, b], &counts, &cfg)
    });
    for (d, s) in sum.iter().enumerate() {
        let mc = s / n as f64;
        assert!(
            (mc - q.mean[d]).abs() < 0.03,
            "component {d}: {mc} vs {}",
            q.mean[d]
        );
    }
}

#[test]
fn gamma_metropolis_is_reversible() {
    // Detailed balance on a frozen target: transitions between two small
    // disjoint cells happen equally often in both directions.
    let cfg = ModelConfig::default();
    let counts = [(4.0, 40.0), (9.0, 15.0)];
    let mut prop = GammaProposal::new([0.5, 0.5]);
    let mut rng = rng_from(21, &[]);
    let cell = |g: [f64; 2], c: [f64; 2]| (g[0] - c[0]).powi(2) + (g[1] - c[1]).powi(2) < 0.04;
    let (a, b) = ([-2.4, 1.2], [-2.0, 1.6]);
    let mut g = [-2.0, 1.0];
    let (mut ab, mut ba) = (0usize, 0usize);
    for _ in 0..1_000_000 {
        let next = step_gamma(g, &counts, &cfg, &mut prop, &mut rng);
        if cell(g, a) && cell(next, b) {
            ab += 1;
        } else if cell(g, b) && cell(next, a) {
            ba += 1;
        }
        g = next;
    }
    let total = (ab + ba) as f64;
    assert!(total > 500.0, "{ab} {ba}");
    assert!(
        (ab as f64 - ba as f64).abs() < 3.0 * total.sqrt(),
        "{ab} vs {ba}"
    );
    // pairwise balance of the acceptance rule on fixed points
    let x = [-2.0, 0.5];
    let y = [-1.5, 1.2];
    let lx = gamma_log_target(x, &counts, &cfg);
    let ly = gamma_log_target(y, &counts, &cfg);
    let a_xy = (ly - lx).exp().min(1.0);
    let a_yx = (lx - ly).exp().min(1.0);
    assert!((lx.exp() * a_xy - ly.exp() * a_yx).abs() < 1e-12 * lx.exp().max(ly.exp()));
}
