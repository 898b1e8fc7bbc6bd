use std::f64::consts::LN_2;

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use super::params::{ModelConfig, PatientLatents, PopulationParams, POINT_MASS_VARIANCE};
use super::record::PatientRecord;
use crate::error::{invalid, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln P(result | logit)` for a Bernoulli with logistic link.
pub fn log_bernoulli_logit(result: u8, logit: f64) -> f64 {
    if result == 1 {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

fn check_obs_params(params: &PopulationParams) -> Result<()> {
    let ok = params.sigma2 > 0.0
        && params.sigma2.is_finite()
        && params.beta_age.is_finite()
        && params.gamma0.is_finite()
        && params.gamma1.is_finite();
    if ok {
        Ok(())
    } else {
        invalid("observation model needs finite coefficients and sigma2 > 0")
    }
}

fn class_mismatch(record: &PatientRecord, eta: u8) -> bool {
    matches!(record.observed_class, Some(c) if c != eta)
}

/// `ln f(y | b, theta)`: Gaussian log-biomarker terms plus logistic biopsy
/// terms. A pathology-confirmed class acts as an indicator on `eta`.
pub fn log_obs_likelihood(
    record: &PatientRecord,
    latents: &PatientLatents,
    params: &PopulationParams,
) -> Result<f64> {
    record.validate()?;
    latents.validate()?;
    check_obs_params(params)?;
    if class_mismatch(record, latents.eta) {
        return Ok(f64::NEG_INFINITY);
    }
    let offset = params.beta_age * record.age_std;
    let psa: f64 = record
        .psa
        .iter()
        .map(|o| {
            let mean = offset + latents.u[0] + latents.u[1] * o.time;
            normal_logpdf(o.value, mean, params.sigma2)
        })
        .sum();
    let logit = params.biopsy_logit(latents.eta);
    let biopsy: f64 = record
        .biopsies
        .iter()
        .map(|o| log_bernoulli_logit(o.result, logit))
        .sum();
    Ok(psa + biopsy)
}

/// `ln g(b | theta)`: class prevalence times independent Gaussian random
/// effects.
pub fn log_latent_density(latents: &PatientLatents, params: &PopulationParams) -> Result<f64> {
    latents.validate()?;
    params.validate()?;
    let c = usize::from(latents.eta);
    let re: f64 = (0..2)
        .map(|d| normal_logpdf(latents.u[d], params.mu[c][d], params.tau2[c][d]))
        .sum();
    Ok(params.log_class_prior(latents.eta) + re)
}

fn beta_logpdf(x: f64, a: f64, b: f64) -> f64 {
    let ln_beta = libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b);
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta
}

fn inv_gamma_logpdf(x: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - libm::lgamma(a) - (a + 1.0) * x.ln() - b / x
}

/// `ln pi(theta)`; `-inf` outside the support.
pub fn log_prior(params: &PopulationParams, config: &ModelConfig) -> f64 {
    let flat = params.to_flat();
    if !flat.iter().all(|v| v.is_finite())
        || !(params.rho > 0.0 && params.rho < 1.0)
        || params.tau2.iter().flatten().any(|&v| v <= 0.0)
        || params.sigma2 <= 0.0
        || params.gamma1 < 0.0
    {
        return f64::NEG_INFINITY;
    }
    let mut lp = beta_logpdf(params.rho, config.a_rho, config.b_rho);
    for c in 0..2 {
        for d in 0..2 {
            lp += normal_logpdf(params.mu[c][d], config.mu_mean[d], config.mu_sd[d].powi(2));
            lp += inv_gamma_logpdf(params.tau2[c][d], config.a_tau, config.b_tau);
        }
    }
    lp += inv_gamma_logpdf(params.sigma2, config.a_tau, config.b_tau);
    lp += normal_logpdf(params.beta_age, 0.0, config.s_beta.powi(2));
    let g_var = config.s_gamma.powi(2);
    lp += normal_logpdf(params.gamma0, 0.0, g_var);
    // half-normal for the class effect
    lp += LN_2 + normal_logpdf(params.gamma1, 0.0, g_var);
    lp
}

/// Draws `b ~ g(. | theta)`.
pub fn sample_latents<R: Rng + ?Sized>(params: &PopulationParams, rng: &mut R) -> PatientLatents {
    let eta = u8::from(rng.random_bool(params.rho.clamp(0.0, 1.0)));
    let c = usize::from(eta);
    let u = std::array::from_fn(|d| {
        let z: f64 = rng.sample(StandardNormal);
        let var = params.tau2[c][d];
        if var < POINT_MASS_VARIANCE {
            params.mu[c][d]
        } else {
            params.mu[c][d] + var.sqrt() * z
        }
    });
    PatientLatents { eta, u }
}

/// Checked wrapper over [`RecordSummary::class_marginal_loglik`].
pub fn marginal_class_loglik(
    record: &PatientRecord,
    eta: u8,
    params: &PopulationParams,
) -> Result<f64> {
    record.validate()?;
    if eta > 1 {
        return invalid("eta must be 0 or 1");
    }
    params.validate_generative()?;
    if params.sigma2 <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            sigma2: params.sigma2,
        });
    }
    Ok(RecordSummary::of(record).class_marginal_loglik(eta, params))
}

/// Sufficient statistics of one record.
///
/// Every likelihood in the model depends on the data only through these,
/// so the hot loops (importance weights, Gibbs updates) evaluate a
/// patient in constant time regardless of follow-up length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordSummary {
    pub age_std: f64,
    pub n_psa: f64,
    pub sum_t: f64,
    pub sum_tt: f64,
    pub sum_y: f64,
    pub sum_ty: f64,
    pub sum_yy: f64,
    pub biopsy_pos: f64,
    pub biopsy_neg: f64,
    pub observed_class: Option<u8>,
}

/// Gaussian conditional of the random effects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    /// Row-major covariance.
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let s = self.cov;
        let l00 = s[0][0].max(0.0).sqrt();
        let l10 = if l00 > 0.0 { s[1][0] / l00 } else { 0.0 };
        let l11 = (s[1][1] - l10 * l10).max(0.0).sqrt();
        [self.mean[0] + l00 * z0, self.mean[1] + l10 * z0 + l11 * z1]
    }
}

impl RecordSummary {
    pub fn of(record: &PatientRecord) -> Self {
        let mut s = Self {
            age_std: record.age_std,
            n_psa: 0.0,
            sum_t: 0.0,
            sum_tt: 0.0,
            sum_y: 0.0,
            sum_ty: 0.0,
            sum_yy: 0.0,
            biopsy_pos: 0.0,
            biopsy_neg: 0.0,
            observed_class: record.observed_class,
        };
        for o in &record.psa {
            s.n_psa += 1.0;
            s.sum_t += o.time;
            s.sum_tt += o.time * o.time;
            s.sum_y += o.value;
            s.sum_ty += o.time * o.value;
            s.sum_yy += o.value * o.value;
        }
        for o in &record.biopsies {
            if o.result == 1 {
                s.biopsy_pos += 1.0;
            } else {
                s.biopsy_neg += 1.0;
            }
        }
        s
    }

    /// `sum (y - a - b t)^2`, clamped at zero against cancellation.
    pub fn residual_ss(&self, a: f64, b: f64) -> f64 {
        let v = self.sum_yy - 2.0 * a * self.sum_y - 2.0 * b * self.sum_ty
            + self.n_psa * a * a
            + 2.0 * a * b * self.sum_t
            + b * b * self.sum_tt;
        v.max(0.0)
    }

    /// Residual sums for `r = y - a - b t`: `(sum r, sum t r)`.
    pub fn residual_moments(&self, a: f64, b: f64) -> [f64; 2] {
        [
            self.sum_y - self.n_psa * a - b * self.sum_t,
            self.sum_ty - a * self.sum_t - b * self.sum_tt,
        ]
    }

    pub fn biopsy_loglik(&self, eta: u8, params: &PopulationParams) -> f64 {
        let logit = params.biopsy_logit(eta);
        let mut ll = 0.0;
        if self.biopsy_pos > 0.0 {
            ll -= self.biopsy_pos * softplus(-logit);
        }
        if self.biopsy_neg > 0.0 {
            ll -= self.biopsy_neg * softplus(logit);
        }
        ll
    }

    pub fn psa_loglik(&self, u: &[f64; 2], params: &PopulationParams) -> f64 {
        if self.n_psa == 0.0 {
            return 0.0;
        }
        let a = params.beta_age * self.age_std + u[0];
        let rss = self.residual_ss(a, u[1]);
        -0.5 * (self.n_psa * (LN_2PI + params.sigma2.ln()) + rss / params.sigma2)
    }

    /// Unchecked `ln f(y | b, theta)`.
    pub fn obs_loglik(&self, latents: &PatientLatents, params: &PopulationParams) -> f64 {
        if matches!(self.observed_class, Some(c) if c != latents.eta) {
            return f64::NEG_INFINITY;
        }
        self.psa_loglik(&latents.u, params) + self.biopsy_loglik(latents.eta, params)
    }

    /// `ln` of the class-conditional marginal likelihood with the random
    /// effects integrated out analytically.
    ///
    /// The log-biomarker vector is Gaussian with covariance
    /// `sigma2 I + W W'`, `W = Z diag(sqrt(tau2))`; the determinant lemma and
    /// Woodbury identity reduce everything to 2x2 algebra on the summary.
    pub fn class_marginal_loglik(&self, eta: u8, params: &PopulationParams) -> f64 {
        if matches!(self.observed_class, Some(c) if c != eta) {
            return f64::NEG_INFINITY;
        }
        self.psa_marginal_loglik(eta, params) + self.biopsy_loglik(eta, params)
    }

    fn psa_marginal_loglik(&self, eta: u8, params: &PopulationParams) -> f64 {
        if self.n_psa == 0.0 {
            return 0.0;
        }
        let c = usize::from(eta);
        let s2 = params.sigma2;
        let sd = params.tau2[c].map(|v| {
            if v < POINT_MASS_VARIANCE {
                0.0
            } else {
                v.sqrt()
            }
        });
        let a = params.beta_age * self.age_std + params.mu[c][0];
        let b = params.mu[c][1];
        let rr = self.residual_ss(a, b);
        let zr = self.residual_moments(a, b);
        // M = sigma2 I + W'W
        let ztz = [[self.n_psa, self.sum_t], [self.sum_t, self.sum_tt]];
        let m00 = s2 + sd[0] * sd[0] * ztz[0][0];
        let m01 = sd[0] * sd[1] * ztz[0][1];
        let m11 = s2 + sd[1] * sd[1] * ztz[1][1];
        let det_m = m00 * m11 - m01 * m01;
        let v = [sd[0] * zr[0], sd[1] * zr[1]];
        let quad_w = (m11 * v[0] * v[0] - 2.0 * m01 * v[0] * v[1] + m00 * v[1] * v[1]) / det_m;
        let quad = (rr - quad_w) / s2;
        let log_det = (self.n_psa - 2.0) * s2.ln() + det_m.ln();
        -0.5 * (self.n_psa * LN_2PI + log_det + quad.max(0.0))
    }

    /// Conditional of the random effects given the class and the biomarker
    /// series: prior `N(mu[eta], diag(tau2[eta]))` updated by the
    /// Gaussian likelihood.
    pub fn random_effect_conditional(&self, eta: u8, params: &PopulationParams) -> Gaussian2 {
        let c = usize::from(eta);
        let mu = params.mu[c];
        let sd = params.tau2[c].map(|v| {
            if v < POINT_MASS_VARIANCE {
                0.0
            } else {
                v.sqrt()
            }
        });
        if self.n_psa == 0.0 {
            return Gaussian2 {
                mean: mu,
                cov: [[sd[0] * sd[0], 0.0], [0.0, sd[1] * sd[1]]],
            };
        }
        let s2 = params.sigma2;
        // cov = D^1/2 (I + D^1/2 Z'Z D^1/2 / s2)^-1 D^1/2
        let a00 = 1.0 + sd[0] * sd[0] * self.n_psa / s2;
        let a01 = sd[0] * sd[1] * self.sum_t / s2;
        let a11 = 1.0 + sd[1] * sd[1] * self.sum_tt / s2;
        let det = a00 * a11 - a01 * a01;
        let inv = [[a11 / det, -a01 / det], [-a01 / det, a00 / det]];
        let cov = [
            [sd[0] * sd[0] * inv[0][0], sd[0] * sd[1] * inv[0][1]],
            [sd[1] * sd[0] * inv[1][0], sd[1] * sd[1] * inv[1][1]],
        ];
        let offset = params.beta_age * self.age_std;
        let zr = self.residual_moments(offset + mu[0], mu[1]);
        let mean = [
            mu[0] + (cov[0][0] * zr[0] + cov[0][1] * zr[1]) / s2,
            mu[1] + (cov[1][0] * zr[0] + cov[1][1] * zr[1]) / s2,
        ];
        Gaussian2 { mean, cov }
    }

    /// Posterior probability of class 1 given theta, with random effects
    /// integrated out.
    pub fn class_probability(&self, params: &PopulationParams) -> f64 {
        let l1 = params.log_class_prior(1) + self.class_marginal_loglik(1, params);
        let l0 = params.log_class_prior(0) + self.class_marginal_loglik(0, params);
        logistic_of_diff(l1, l0)
    }

    /// `ln sum_c P(c) m_c`: the per-draw marginal likelihood of the record.
    pub fn marginal_loglik(&self, params: &PopulationParams) -> f64 {
        let l1 = params.log_class_prior(1) + self.class_marginal_loglik(1, params);
        let l0 = params.log_class_prior(0) + self.class_marginal_loglik(0, params);
        log_add_exp(l0, l1)
    }
}

/// `e^a / (e^a + e^b)` with infinities handled.
pub fn logistic_of_diff(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NAN;
    }
    if a == f64::NEG_INFINITY {
        return 0.0;
    }
    if b == f64::NEG_INFINITY {
        return 1.0;
    }
    let d = b - a;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
