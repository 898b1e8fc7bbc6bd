use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Variances at or below this are treated as point masses.
pub const POINT_MASS_VARIANCE: f64 = 1e-300;

/// Population-level parameters shared by every patient.
///
/// Class 0 is the indolent state, class 1 the aggressive state. `mu` and
/// `tau2` are indexed `[class][component]` where component 0 is the random
/// intercept and component 1 the random slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationParams {
    pub rho: f64,
    pub beta_age: f64,
    pub mu: [[f64; 2]; 2],
    pub tau2: [[f64; 2]; 2],
    pub sigma2: f64,
    pub gamma0: f64,
    pub gamma1: f64,
}

/// Names of the entries of [`PopulationParams::to_flat`], in order.
pub const PARAM_LAYOUT: [&str; 13] = [
    "rho", "beta_age", "mu0_0", "mu0_1", "mu1_0", "mu1_1", "tau2_0_0", "tau2_0_1", "tau2_1_0",
    "tau2_1_1", "sigma2", "gamma0", "gamma1",
];

impl PopulationParams {
    /// Checks the strict invariants: `0 < rho < 1`, every variance positive,
    /// every value finite.
    pub fn validate(&self) -> Result<()> {
        self.check_finite()?;
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return invalid(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if self.tau2.iter().flatten().any(|&v| v <= 0.0) {
            return invalid("tau2 entries must be strictly positive");
        }
        if self.sigma2 <= 0.0 {
            return invalid("sigma2 must be strictly positive");
        }
        Ok(())
    }

    /// Relaxed check for generative use: degenerate prevalence and zero
    /// variances are allowed.
    pub fn validate_generative(&self) -> Result<()> {
        self.check_finite()?;
        if !(0.0..=1.0).contains(&self.rho) {
            return invalid(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.tau2.iter().flatten().any(|&v| v < 0.0) || self.sigma2 < 0.0 {
            return invalid("variances must be non-negative");
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.to_flat().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            invalid("population parameters must be finite")
        }
    }

    pub fn to_flat(&self) -> [f64; 13] {
        [
            self.rho,
            self.beta_age,
            self.mu[0][0],
            self.mu[0][1],
            self.mu[1][0],
            self.mu[1][1],
            self.tau2[0][0],
            self.tau2[0][1],
            self.tau2[1][0],
            self.tau2[1][1],
            self.sigma2,
            self.gamma0,
            self.gamma1,
        ]
    }

    pub fn from_flat(v: &[f64; 13]) -> Self {
        Self {
            rho: v[0],
            beta_age: v[1],
            mu: [[v[2], v[3]], [v[4], v[5]]],
            tau2: [[v[6], v[7]], [v[8], v[9]]],
            sigma2: v[10],
            gamma0: v[11],
            gamma1: v[12],
        }
    }

    /// Log prior probability of a class label.
    pub fn log_class_prior(&self, eta: u8) -> f64 {
        if eta == 1 {
            self.rho.ln()
        } else {
            (-self.rho).ln_1p()
        }
    }

    /// Biopsy reclassification logit for a class.
    pub fn biopsy_logit(&self, eta: u8) -> f64 {
        self.gamma0 + self.gamma1 * f64::from(eta)
    }
}

/// One patient's latent variables: class and random (intercept, slope).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientLatents {
    pub eta: u8,
    pub u: [f64; 2],
}

impl PatientLatents {
    pub fn validate(&self) -> Result<()> {
        if self.eta > 1 {
            return invalid(format!("eta must be 0 or 1, got {}", self.eta));
        }
        if !self.u.iter().all(|v| v.is_finite()) {
            return invalid("random effects must be finite");
        }
        Ok(())
    }
}

/// Prior hyperparameters.
///
/// `rho ~ Beta(a_rho, b_rho)`, `mu[c][d] ~ N(mu_mean[d], mu_sd[d]^2)`,
/// every `tau2` entry and `sigma2 ~ InvGamma(a_tau, b_tau)`,
/// `beta_age ~ N(0, s_beta^2)`, `gamma0 ~ N(0, s_gamma^2)` and
/// `gamma1 ~ N(0, s_gamma^2)` truncated to `gamma1 >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub a_rho: f64,
    pub b_rho: f64,
    pub mu_mean: [f64; 2],
    pub mu_sd: [f64; 2],
    pub a_tau: f64,
    pub b_tau: f64,
    pub s_beta: f64,
    pub s_gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            a_rho: 1.0,
            b_rho: 1.0,
            mu_mean: [0.0, 0.0],
            mu_sd: [10.0, 10.0],
            a_tau: 2.0,
            b_tau: 0.005,
            s_beta: 10.0,
            s_gamma: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.a_rho,
            self.b_rho,
            self.mu_sd[0],
            self.mu_sd[1],
            self.a_tau,
            self.b_tau,
            self.s_beta,
            self.s_gamma,
        ];
        if scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return invalid("prior scale hyperparameters must be finite and positive");
        }
        if !self.mu_mean.iter().all(|m| m.is_finite()) {
            return invalid("prior means must be finite");
        }
        Ok(())
    }
}
