//! Gibbs kernels for the joint posterior.
//!
//! Every full conditional except the biopsy coefficients is conjugate. The
//! biopsy coefficients move by a random-walk Metropolis step whose proposal
//! scale adapts during burn-in only.

use rand::{Rng, RngExt};
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::model::{softplus, ModelConfig, PatientLatents, PopulationParams, RecordSummary};

/// Target acceptance rate of the biopsy-coefficient random walk.
pub const TARGET_ACCEPTANCE: f64 = 0.3;

/// Sufficient statistics of a cohort, in canonical patient order.
#[derive(Debug, Clone)]
pub struct CohortData {
    pub summaries: Vec<RecordSummary>,
}

impl CohortData {
    pub fn new(summaries: Vec<RecordSummary>) -> Self {
        Self { summaries }
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `InvGamma(shape, scale)` via the reciprocal of a Gamma draw.
pub fn draw_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("inverse-gamma shape and scale are positive");
    1.0 / g.sample(rng)
}

/// Joint draw of `(eta, u)` from their conditional given theta and the
/// patient's data: the class from its collapsed probability, then the random
/// effects from their Gaussian conditional. A confirmed class is kept.
pub fn update_patient_block<R: Rng + ?Sized>(
    summary: &RecordSummary,
    params: &PopulationParams,
    rng: &mut R,
) -> PatientLatents {
    let eta = match summary.observed_class {
        Some(c) => c,
        None => {
            let p1 = summary.class_probability(params);
            u8::from(rng.random::<f64>() < p1)
        }
    };
    let u = summary.random_effect_conditional(eta, params).sample(rng);
    PatientLatents { eta, u }
}

pub fn draw_rho<R: Rng + ?Sized>(
    latents: &[PatientLatents],
    config: &ModelConfig,
    rng: &mut R,
) -> f64 {
    let ones = latents.iter().filter(|l| l.eta == 1).count() as f64;
    let zeros = latents.len() as f64 - ones;
    Beta::new(config.a_rho + ones, config.b_rho + zeros)
        .expect("beta parameters are positive")
        .sample(rng)
}

/// Draws `mu[class][component]` given the random effects of that class.
pub fn draw_mu<R: Rng + ?Sized>(
    class: usize,
    component: usize,
    latents: &[PatientLatents],
    params: &PopulationParams,
    config: &ModelConfig,
    rng: &mut R,
) -> f64 {
    let (n, sum) = latents
        .iter()
        .filter(|l| usize::from(l.eta) == class)
        .fold((0.0, 0.0), |(n, s), l| (n + 1.0, s + l.u[component]));
    let prior_prec = config.mu_sd[component].powi(-2);
    let tau2 = params.tau2[class][component];
    let prec = prior_prec + n / tau2;
    let mean = (config.mu_mean[component] * prior_prec + sum / tau2) / prec;
    mean + standard_normal(rng) / prec.sqrt()
}

pub fn draw_tau2<R: Rng + ?Sized>(
    class: usize,
    component: usize,
    latents: &[PatientLatents],
    params: &PopulationParams,
    config: &ModelConfig,
    rng: &mut R,
) -> f64 {
    let mu = params.mu[class][component];
    let (n, ss) = latents
        .iter()
        .filter(|l| usize::from(l.eta) == class)
        .fold((0.0, 0.0), |(n, s), l| {
            (n + 1.0, s + (l.u[component] - mu).powi(2))
        });
    draw_inv_gamma(config.a_tau + 0.5 * n, config.b_tau + 0.5 * ss, rng)
}

pub fn draw_sigma2<R: Rng + ?Sized>(
    data: &CohortData,
    latents: &[PatientLatents],
    params: &PopulationParams,
    config: &ModelConfig,
    rng: &mut R,
) -> f64 {
    let (n, rss) = data
        .summaries
        .iter()
        .zip(latents)
        .fold((0.0, 0.0), |(n, s), (sum, l)| {
            let a = params.beta_age * sum.age_std + l.u[0];
            (n + sum.n_psa, s + sum.residual_ss(a, l.u[1]))
        });
    draw_inv_gamma(config.a_tau + 0.5 * n, config.b_tau + 0.5 * rss, rng)
}

pub fn draw_beta_age<R: Rng + ?Sized>(
    data: &CohortData,
    latents: &[PatientLatents],
    params: &PopulationParams,
    config: &ModelConfig,
    rng: &mut R,
) -> f64 {
    let (xx, xy) = data
        .summaries
        .iter()
        .zip(latents)
        .fold((0.0, 0.0), |(xx, xy), (s, l)| {
            let r = s.residual_moments(l.u[0], l.u[1])[0];
            (xx + s.age_std * s.age_std * s.n_psa, xy + s.age_std * r)
        });
    let prec = config.s_beta.powi(-2) + xx / params.sigma2;
    let mean = (xy / params.sigma2) / prec;
    mean + standard_normal(rng) / prec.sqrt()
}

/// Biopsy outcome counts per class: `[class] -> (positive, negative)`.
pub fn biopsy_counts(data: &CohortData, latents: &[PatientLatents]) -> [(f64, f64); 2] {
    let mut out = [(0.0, 0.0); 2];
    for (s, l) in data.summaries.iter().zip(latents) {
        let c = &mut out[usize::from(l.eta)];
        c.0 += s.biopsy_pos;
        c.1 += s.biopsy_neg;
    }
    out
}

/// Log target of the biopsy coefficients up to a constant; `-inf` below the
/// identifying constraint `gamma1 >= 0`.
pub fn gamma_log_target(gamma: [f64; 2], counts: &[(f64, f64); 2], config: &ModelConfig) -> f64 {
    if gamma[1] < 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut lt = -0.5 * (gamma[0] * gamma[0] + gamma[1] * gamma[1]) / config.s_gamma.powi(2);
    for (eta, &(pos, neg)) in counts.iter().enumerate() {
        let logit = gamma[0] + gamma[1] * eta as f64;
        lt -= pos * softplus(-logit) + neg * softplus(logit);
    }
    lt
}

/// Random-walk proposal state for `(gamma0, gamma1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaProposal {
    pub sd: [f64; 2],
    pub proposed: u64,
    pub accepted: u64,
    window_proposed: u64,
    window_accepted: u64,
}

impl GammaProposal {
    pub fn new(sd: [f64; 2]) -> Self {
        Self {
            sd,
            proposed: 0,
            accepted: 0,
            window_proposed: 0,
            window_accepted: 0,
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Rescales the proposal toward the target acceptance rate using the
    /// window since the last call, then starts a new window.
    pub fn adapt(&mut self) {
        if self.window_proposed == 0 {
            return;
        }
        let rate = self.window_accepted as f64 / self.window_proposed as f64;
        let factor = (2.0 * (rate - TARGET_ACCEPTANCE)).exp();
        for s in &mut self.sd {
            *s = (*s * factor).clamp(1e-4, 10.0);
        }
        self.window_proposed = 0;
        self.window_accepted = 0;
    }

    /// Resets acceptance counters (at the end of burn-in).
    pub fn reset_counts(&mut self) {
        self.proposed = 0;
        self.accepted = 0;
        self.window_proposed = 0;
        self.window_accepted = 0;
    }
}

/// One Metropolis step for `(gamma0, gamma1)`.
pub fn step_gamma<R: Rng + ?Sized>(
    current: [f64; 2],
    counts: &[(f64, f64); 2],
    config: &ModelConfig,
    proposal: &mut GammaProposal,
    rng: &mut R,
) -> [f64; 2] {
    let cand = [
        current[0] + proposal.sd[0] * standard_normal(rng),
        current[1] + proposal.sd[1] * standard_normal(rng),
    ];
    proposal.proposed += 1;
    proposal.window_proposed += 1;
    let log_ratio =
        gamma_log_target(cand, counts, config) - gamma_log_target(current, counts, config);
    let u: f64 = rng.random();
    if log_ratio >= 0.0 || u.ln() < log_ratio {
        proposal.accepted += 1;
        proposal.window_accepted += 1;
        cand
    } else {
        current
    }
}

/// Which population parameter an update touched; names non-finite failures.
pub(crate) fn first_non_finite(params: &PopulationParams) -> Option<&'static str> {
    let flat = params.to_flat();
    crate::model::PARAM_LAYOUT
        .iter()
        .zip(flat)
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| *name)
}

/// Sequential sweep over the population-level conditionals.
pub fn update_population_block<R: Rng + ?Sized>(
    data: &CohortData,
    latents: &[PatientLatents],
    params: &PopulationParams,
    config: &ModelConfig,
    proposal: &mut GammaProposal,
    rng: &mut R,
) -> PopulationParams {
    let mut next = *params;
    next.rho = draw_rho(latents, config, rng);
    for c in 0..2 {
        for d in 0..2 {
            next.mu[c][d] = draw_mu(c, d, latents, &next, config, rng);
            next.tau2[c][d] = draw_tau2(c, d, latents, &next, config, rng);
        }
    }
    next.beta_age = draw_beta_age(data, latents, &next, config, rng);
    next.sigma2 = draw_sigma2(data, latents, &next, config, rng);
    let counts = biopsy_counts(data, latents);
    let g = step_gamma([next.gamma0, next.gamma1], &counts, config, proposal, rng);
    next.gamma0 = g[0];
    next.gamma1 = g[1];
    next
}

/// Draws theta from the prior (with `gamma1` half-normal).
pub fn draw_from_prior<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> PopulationParams {
    let rho = Beta::new(config.a_rho, config.b_rho)
        .expect("beta parameters are positive")
        .sample(rng);
    let mut mu = [[0.0; 2]; 2];
    let mut tau2 = [[0.0; 2]; 2];
    for c in 0..2 {
        for d in 0..2 {
            mu[c][d] = config.mu_mean[d] + config.mu_sd[d] * standard_normal(rng);
            tau2[c][d] = draw_inv_gamma(config.a_tau, config.b_tau, rng);
        }
    }
    PopulationParams {
        rho,
        beta_age: config.s_beta * standard_normal(rng),
        mu,
        tau2,
        sigma2: draw_inv_gamma(config.a_tau, config.b_tau, rng),
        gamma0: config.s_gamma * standard_normal(rng),
        gamma1: (config.s_gamma * standard_normal(rng)).abs(),
    }
}
