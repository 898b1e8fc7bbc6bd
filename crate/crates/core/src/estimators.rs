//! Alternative risk estimators used as cross-checks on importance sampling:
//! rejection sampling on unnormalized weights, the conditional-posterior
//! average, a Rao-Blackwellized importance estimate, and a brute-force
//! tensor-grid oracle.

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::importance::{
    effective_sample_size, normalize_log_weights, weigh_new_patient_fixed, ProposalCache,
    WeightedProposalSet,
};
use crate::model::{
    log_add_exp, logistic_of_diff, normal_logpdf, PatientLatents, PatientRecord, PopulationParams,
    RecordSummary, POINT_MASS_VARIANCE,
};
use crate::rng::rng_from;
use crate::store::PosteriorSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionResult {
    /// Indices of accepted proposals.
    pub accepted: Vec<usize>,
    pub risk: f64,
    pub acceptance_rate: f64,
    /// Mean weight over max weight: the expected acceptance rate.
    pub expected_acceptance: f64,
    /// Binomial standard error of `risk` over the accepted draws, with the
    /// Agresti-Coull adjusted proportion so that it stays positive when
    /// every accepted draw has the same class.
    pub risk_se: f64,
}

/// Accepts proposal `j` with probability `w_j / max w` using the exact
/// maximum over the set as envelope.
pub fn rejection_from_set(set: &WeightedProposalSet, seed: u64) -> Result<RejectionResult> {
    let max = set
        .log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights {
            proposals: set.len(),
        });
    }
    let mut rng = rng_from(seed, &[]);
    let mut accepted = Vec::new();
    let mut ratio_sum = 0.0;
    for (p, lw) in set.log_weights.iter().enumerate() {
        let ratio = (lw - max).exp();
        ratio_sum += ratio;
        if rng.random::<f64>() < ratio {
            accepted.push(p);
        }
    }
    let n_acc = accepted.len() as f64;
    let ones = accepted
        .iter()
        .map(|&p| f64::from(set.proposals[p].latents.eta))
        .sum::<f64>();
    let risk = ones / n_acc;
    let adjusted = (ones + 2.0) / (n_acc + 4.0);
    Ok(RejectionResult {
        risk,
        acceptance_rate: n_acc / set.len() as f64,
        expected_acceptance: ratio_sum / set.len() as f64,
        risk_se: (adjusted * (1.0 - adjusted) / n_acc).sqrt(),
        accepted,
    })
}

/// Rejection sampling over the first `m` cached candidates for a new
/// patient.
pub fn rejection_sample(
    cache: &ProposalCache,
    store: &PosteriorSample,
    record: &PatientRecord,
    m: usize,
    seed: u64,
) -> Result<RejectionResult> {
    let set = weigh_new_patient_fixed(cache, store, record, m)?;
    rejection_from_set(&set, seed)
}

/// `(1/J) sum_j P(eta = 1 | y, theta_j)`: the class posterior averaged over
/// the stored parameter draws, which are not reweighted.
pub fn conditional_posterior_estimate(
    store: &PosteriorSample,
    record: &PatientRecord,
) -> Result<f64> {
    record.validate()?;
    let summary = RecordSummary::of(record);
    // collected before summing so the result does not depend on the
    // thread split
    let probs: Vec<f64> = store
        .params()
        .par_iter()
        .map(|p| summary.class_probability(p))
        .collect();
    let total: f64 = probs.iter().sum();
    let risk = total / store.n_draws() as f64;
    if !risk.is_finite() {
        return Err(Error::DegenerateWeights {
            proposals: store.n_draws(),
        });
    }
    Ok(risk)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaoBlackwellEstimate {
    pub risk: f64,
    pub ess: f64,
}

/// Importance estimate with the latents integrated out: each draw is
/// weighted by the record's marginal likelihood and contributes its exact
/// class probability. No proposal noise remains.
pub fn rao_blackwell_is_estimate(
    store: &PosteriorSample,
    record: &PatientRecord,
) -> Result<RaoBlackwellEstimate> {
    record.validate()?;
    let summary = RecordSummary::of(record);
    let (log_weights, probs): (Vec<f64>, Vec<f64>) = store
        .params()
        .par_iter()
        .map(|p| (summary.marginal_loglik(p), summary.class_probability(p)))
        .unzip();
    let weights = normalize_log_weights(&log_weights)?;
    let risk = weights
        .iter()
        .zip(&probs)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, p)| w * p)
        .sum();
    Ok(RaoBlackwellEstimate {
        risk,
        ess: effective_sample_size(&weights),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Nodes per random-effect axis; odd so the coarse check grid nests.
    pub points: usize,
    /// Half-width of each axis in prior standard deviations.
    pub half_width_sd: f64,
    /// Evenly spaced subsample of parameter draws; `None` uses all.
    pub max_draws: Option<usize>,
    /// Largest tolerated change in either estimate from the half-resolution
    /// grid, after Richardson scaling.
    pub tolerance: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 161,
            half_width_sd: 8.0,
            max_draws: None,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    /// Class probability averaged over draws without reweighting.
    pub risk: f64,
    /// Class probability with draws reweighted by the marginal likelihood.
    pub reweighted_risk: f64,
    pub draws_used: usize,
}

/// Trapezoid nodes and log-weights along one axis.
fn axis(mean: f64, var: f64, points: usize, half_width_sd: f64) -> Vec<(f64, f64)> {
    if var < POINT_MASS_VARIANCE {
        return vec![(mean, 0.0)];
    }
    let sd = var.sqrt();
    let lo = mean - half_width_sd * sd;
    let h = 2.0 * half_width_sd * sd / (points - 1) as f64;
    (0..points)
        .map(|k| {
            let x = lo + h * k as f64;
            let w = if k == 0 || k + 1 == points {
                0.5 * h
            } else {
                h
            };
            (x, w.ln() + normal_logpdf(x, mean, var))
        })
        .collect()
}

/// `ln` of `P(c) * integral f(y | c, u) g(u | c) du` on the grid.
fn log_class_mass(
    summary: &RecordSummary,
    eta: u8,
    params: &PopulationParams,
    points: usize,
    half_width_sd: f64,
) -> f64 {
    if matches!(summary.observed_class, Some(c) if c != eta) {
        return f64::NEG_INFINITY;
    }
    let c = usize::from(eta);
    let a0 = axis(params.mu[c][0], params.tau2[c][0], points, half_width_sd);
    let a1 = axis(params.mu[c][1], params.tau2[c][1], points, half_width_sd);
    let mut terms = Vec::with_capacity(a0.len() * a1.len());
    for &(u0, w0) in &a0 {
        for &(u1, w1) in &a1 {
            let lat = PatientLatents { eta, u: [u0, u1] };
            terms.push(w0 + w1 + summary.obs_loglik(&lat, params));
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    params.log_class_prior(eta) + max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn grid_pass(
    summary: &RecordSummary,
    draws: &[PopulationParams],
    points: usize,
    half_width_sd: f64,
) -> Result<GridEstimate> {
    let per_draw: Vec<(f64, f64)> = draws
        .par_iter()
        .map(|p| {
            let l1 = log_class_mass(summary, 1, p, points, half_width_sd);
            let l0 = log_class_mass(summary, 0, p, points, half_width_sd);
            (logistic_of_diff(l1, l0), log_add_exp(l0, l1))
        })
        .collect();
    let log_weights: Vec<f64> = per_draw.iter().map(|d| d.1).collect();
    let weights = normalize_log_weights(&log_weights)?;
    let n = draws.len() as f64;
    Ok(GridEstimate {
        risk: per_draw.iter().map(|d| d.0).sum::<f64>() / n,
        reweighted_risk: weights
            .iter()
            .zip(&per_draw)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, d)| w * d.0)
            .sum(),
        draws_used: draws.len(),
    })
}

/// Brute-force class probability by tensor-grid integration over the random
/// effects. A half-resolution pass guards against an under-resolved grid.
pub fn grid_oracle(
    record: &PatientRecord,
    store: &PosteriorSample,
    spec: &GridSpec,
) -> Result<GridEstimate> {
    record.validate()?;
    if spec.points < 3 || spec.points.is_multiple_of(2) {
        return invalid("grid points must be odd and at least 3");
    }
    if !(spec.half_width_sd >= 8.0) {
        return invalid("grid must cover at least 8 prior standard deviations");
    }
    let j = store.n_draws();
    let k = spec.max_draws.unwrap_or(j).clamp(1, j);
    let draws: Vec<PopulationParams> = (0..k).map(|i| store.params()[i * j / k]).collect();
    let summary = RecordSummary::of(record);
    let fine = grid_pass(&summary, &draws, spec.points, spec.half_width_sd)?;
    let coarse = grid_pass(&summary, &draws, spec.points / 2 + 1, spec.half_width_sd)?;
    for (f, c) in [
        (fine.risk, coarse.risk),
        (fine.reweighted_risk, coarse.reweighted_risk),
    ] {
        // trapezoid error is O(h^2): the fine grid's error is about a third
        // of the gap
        if (f - c).abs() / 3.0 > spec.tolerance {
            return Err(Error::GridPrecision {
                coarse: c,
                fine: f,
                tolerance: spec.tolerance,
            });
        }
    }
    Ok(fine)
}

/// Grid oracle for a single parameter value.
pub fn grid_oracle_at(
    record: &PatientRecord,
    params: &PopulationParams,
    spec: &GridSpec,
) -> Result<GridEstimate> {
    params.validate_generative()?;
    grid_oracle(record, &PosteriorSample::from_params(vec![*params])?, spec)
}
