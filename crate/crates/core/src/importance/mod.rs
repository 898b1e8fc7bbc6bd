//! Importance-sampling updates of a fitted posterior.
//!
//! New patients are handled by proposing latents from the latent prior of
//! each stored parameter draw; the importance weight then reduces to the new
//! patient's observation likelihood. New measurements on a patient already
//! in the store reuse the stored joint draws, weighted by the likelihood of
//! the new measurements alone.

mod cache;

use std::time::Instant;

use rayon::prelude::*;

pub use cache::{generate_proposals, ProposalCache};

use crate::error::{invalid, Error, Result};
use crate::model::{
    ObservationBlock, PatientLatents, PatientRecord, PopulationParams, RecordSummary,
};
use crate::store::PosteriorSample;

/// Normalizes log-weights with a max shift. Fails when every entry is
/// `-inf` (the data have zero probability under every proposal).
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights
        .iter()
        .any(|l| l.is_nan() || *l == f64::INFINITY)
    {
        return invalid("log-weights must be finite or -inf");
    }
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights {
            proposals: log_weights.len(),
        });
    }
    let mut w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    Ok(w)
}

/// `1 / sum w^2` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// One proposal: a stored parameter draw and the latents paired with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub draw: usize,
    pub latents: PatientLatents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedProposalSet {
    pub patient_id: String,
    pub proposals: Vec<Proposal>,
    pub log_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
    /// Number of weighing rounds (1 when no expansion happened).
    pub generation: usize,
    /// Wall time of each round in milliseconds.
    pub round_ms: Vec<f64>,
    /// The proposal budget ran out before the ESS threshold was reached.
    pub capped: bool,
    /// ESS below 2: effectively a single proposal carries the estimate.
    pub degenerate: bool,
}

impl WeightedProposalSet {
    pub fn from_log_weights(
        patient_id: impl Into<String>,
        proposals: Vec<Proposal>,
        log_weights: Vec<f64>,
    ) -> Result<Self> {
        if proposals.len() != log_weights.len() {
            return invalid("one log-weight per proposal is required");
        }
        let weights = normalize_log_weights(&log_weights)?;
        let ess = effective_sample_size(&weights);
        Ok(Self {
            patient_id: patient_id.into(),
            proposals,
            log_weights,
            weights,
            ess,
            generation: 1,
            round_ms: Vec::new(),
            capped: false,
            degenerate: ess < 2.0,
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.round_ms.iter().sum()
    }

    /// Checks the weight invariants against the store the draws index.
    pub fn validate(&self, store: &PosteriorSample) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return invalid(format!("weights are not normalized (sum {total})"));
        }
        let m = self.len() as f64;
        if !(self.ess >= 1.0 - 1e-9 && self.ess <= m * (1.0 + 1e-9)) {
            return invalid(format!("ess {} outside [1, {m}]", self.ess));
        }
        if self.proposals.iter().any(|p| p.draw >= store.n_draws()) {
            return invalid("proposal references a draw outside the store");
        }
        Ok(())
    }

    /// `sum_j w_j f(b_j, theta_j)`.
    pub fn functional<F>(&self, store: &PosteriorSample, f: F) -> f64
    where
        F: Fn(&PatientLatents, &PopulationParams) -> f64,
    {
        let params = store.params();
        self.proposals
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(p, w)| w * f(&p.latents, &params[p.draw]))
            .sum()
    }

    /// Weighted mean of the class indicator, clamped to `[0, 1]` against
    /// rounding in the weight sum.
    pub fn risk(&self) -> f64 {
        self.proposals
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f64::from(p.latents.eta))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Delta-method Monte Carlo standard error of [`Self::risk`]:
    /// `sqrt(sum w^2 (eta - risk)^2)`.
    pub fn risk_se(&self) -> f64 {
        let r = self.risk();
        self.proposals
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| (w * (f64::from(p.latents.eta) - r)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `sum_j w_j f(b_j, theta_j)` over a weighted set.
pub fn posterior_functional<F>(set: &WeightedProposalSet, store: &PosteriorSample, f: F) -> f64
where
    F: Fn(&PatientLatents, &PopulationParams) -> f64,
{
    set.functional(store, f)
}

/// Where the proposals of an update come from.
#[derive(Debug, Clone, Copy)]
pub enum UpdateTarget<'a> {
    /// A patient not in the store, with candidates from a proposal cache.
    NewPatient {
        cache: &'a ProposalCache,
        record: &'a PatientRecord,
    },
    /// New measurements for a patient in the store; proposals are the
    /// stored draws of that patient.
    NewObservations {
        record: &'a PatientRecord,
        block: &'a ObservationBlock,
    },
}

struct Pool<'a> {
    store: &'a PosteriorSample,
    summary: RecordSummary,
    source: Source<'a>,
}

enum Source<'a> {
    Cache(&'a ProposalCache),
    Stored(&'a [PatientLatents]),
}

impl<'a> Pool<'a> {
    fn new(store: &'a PosteriorSample, target: UpdateTarget<'a>) -> Result<(String, Self)> {
        match target {
            UpdateTarget::NewPatient { cache, record } => {
                cache.check_store(store)?;
                record.validate()?;
                if store.patient_index(&record.id).is_some() {
                    return invalid(format!(
                        "patient {:?} is already in the store; add observations instead",
                        record.id
                    ));
                }
                let pool = Pool {
                    store,
                    summary: RecordSummary::of(record),
                    source: Source::Cache(cache),
                };
                Ok((record.id.clone(), pool))
            }
            UpdateTarget::NewObservations { record, block } => {
                let index = store
                    .patient_index(&record.id)
                    .ok_or_else(|| Error::UnknownPatient(record.id.clone()))?;
                record.validate()?;
                block.validate_after(record)?;
                let pool = Pool {
                    store,
                    summary: RecordSummary::of(&block.as_record(&record.id, record.age_std)),
                    source: Source::Stored(store.patient_draws(index)),
                };
                Ok((record.id.clone(), pool))
            }
        }
    }

    /// Upper bound on the number of distinct proposals.
    fn capacity(&self) -> usize {
        match self.source {
            Source::Cache(_) => usize::MAX,
            Source::Stored(draws) => draws.len(),
        }
    }

    fn default_max(&self) -> usize {
        match self.source {
            Source::Cache(c) => c.len(),
            Source::Stored(draws) => draws.len(),
        }
    }

    fn proposal(&self, p: usize) -> Proposal {
        match self.source {
            Source::Cache(c) => Proposal {
                draw: c.draw_of(p),
                latents: c.candidate(self.store, p),
            },
            Source::Stored(draws) => Proposal {
                draw: p,
                latents: draws[p],
            },
        }
    }

    fn weigh_range(&self, lo: usize, hi: usize) -> (Vec<Proposal>, Vec<f64>) {
        let params = self.store.params();
        (lo..hi)
            .into_par_iter()
            .map(|p| {
                let prop = self.proposal(p);
                let lw = self.summary.obs_loglik(&prop.latents, &params[prop.draw]);
                (prop, lw)
            })
            .unzip()
    }
}

fn weigh_first(
    store: &PosteriorSample,
    target: UpdateTarget,
    m: usize,
) -> Result<WeightedProposalSet> {
    let (id, pool) = Pool::new(store, target)?;
    if m == 0 || m > pool.capacity() {
        return invalid(format!(
            "cannot weigh {m} proposals (capacity {})",
            pool.capacity()
        ));
    }
    let start = Instant::now();
    let (proposals, log_weights) = pool.weigh_range(0, m);
    let mut set = WeightedProposalSet::from_log_weights(id, proposals, log_weights)?;
    set.round_ms.push(start.elapsed().as_secs_f64() * 1e3);
    Ok(set)
}

/// Weighs every cached candidate for a new patient.
pub fn weigh_new_patient(
    cache: &ProposalCache,
    store: &PosteriorSample,
    record: &PatientRecord,
) -> Result<WeightedProposalSet> {
    weigh_first(
        store,
        UpdateTarget::NewPatient { cache, record },
        cache.len(),
    )
}

/// Weighs the first `m` candidates for a new patient; candidates past the
/// cache are regenerated from its seed.
pub fn weigh_new_patient_fixed(
    cache: &ProposalCache,
    store: &PosteriorSample,
    record: &PatientRecord,
    m: usize,
) -> Result<WeightedProposalSet> {
    weigh_first(store, UpdateTarget::NewPatient { cache, record }, m)
}

/// Reweighs the stored draws of an existing patient by the likelihood of
/// newly arrived observations.
pub fn weigh_new_observations(
    store: &PosteriorSample,
    record: &PatientRecord,
    block: &ObservationBlock,
) -> Result<WeightedProposalSet> {
    weigh_first(
        store,
        UpdateTarget::NewObservations { record, block },
        store.n_draws(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicSettings {
    pub initial_m: usize,
    pub ess_threshold: f64,
    pub growth_factor: f64,
    /// Proposal budget; defaults to the cache size (or `J` for stored draws).
    pub max_m: Option<usize>,
}

impl Default for DynamicSettings {
    fn default() -> Self {
        Self {
            initial_m: 50_000,
            ess_threshold: 1000.0,
            growth_factor: 10.0,
            max_m: None,
        }
    }
}

/// Weighs proposals in geometrically growing rounds until the ESS reaches
/// the threshold or the budget is spent. Earlier weights are kept; each
/// round only weighs the new proposals and renormalizes over the union.
pub fn dynamic_update(
    store: &PosteriorSample,
    target: UpdateTarget,
    settings: &DynamicSettings,
) -> Result<WeightedProposalSet> {
    if !(settings.growth_factor > 1.0) {
        return invalid("growth_factor must exceed 1");
    }
    if !(settings.ess_threshold >= 1.0) {
        return invalid("ess_threshold must be at least 1");
    }
    let (id, pool) = Pool::new(store, target)?;
    let max_m = settings
        .max_m
        .unwrap_or_else(|| pool.default_max())
        .min(pool.capacity());
    if settings.initial_m == 0 || max_m == 0 {
        return invalid("proposal counts must be at least 1");
    }
    if settings.max_m.is_some_and(|m| settings.initial_m > m) {
        return invalid("initial_m exceeds max_m");
    }
    let mut m = settings.initial_m.min(max_m);
    let mut proposals = Vec::new();
    let mut log_weights = Vec::new();
    let mut round_ms = Vec::new();
    loop {
        let start = Instant::now();
        let (p, lw) = pool.weigh_range(proposals.len(), m);
        proposals.extend(p);
        log_weights.extend(lw);
        let weights = normalize_log_weights(&log_weights);
        round_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let done = match &weights {
            Ok(w) => effective_sample_size(w) >= settings.ess_threshold,
            Err(_) => false,
        };
        if done || m >= max_m {
            let weights = weights?;
            let ess = effective_sample_size(&weights);
            return Ok(WeightedProposalSet {
                patient_id: id,
                proposals,
                log_weights,
                weights,
                ess,
                generation: round_ms.len(),
                round_ms,
                capped: ess < settings.ess_threshold,
                degenerate: ess < 2.0,
            });
        }
        m = ((m as f64 * settings.growth_factor).ceil() as usize).min(max_m);
    }
}
