//! Batch Metropolis-within-Gibbs fitting of the full joint posterior.

mod kernels;
mod summary;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kernels::{
    biopsy_counts, draw_beta_age, draw_from_prior, draw_inv_gamma, draw_mu, draw_rho, draw_sigma2,
    draw_tau2, gamma_log_target, step_gamma, update_patient_block, update_population_block,
    CohortData, GammaProposal, TARGET_ACCEPTANCE,
};
pub use summary::{potential_scale_reduction, summarize, ParamSummary};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, PatientLatents, PatientRecord, PopulationParams, RecordSummary};
use crate::rng::{rng_from, SimRng};
use crate::store::{canonical_cohort, cohort_digest, PosteriorSample, SampleMeta};

/// Adaptation window (iterations) for the gamma random walk during burn-in.
pub const ADAPT_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    pub chains: usize,
    /// Total iterations per chain, burn-in included.
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl FitSettings {
    /// 4 chains x 5,000 kept draws after 1,000 burn-in iterations.
    pub fn desk(seed: u64) -> Self {
        Self {
            chains: 4,
            iters: 6_000,
            burn_in: 1_000,
            thin: 1,
            seed,
        }
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.iters - self.burn_in) / self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 {
            return invalid("chains and thin must be at least 1");
        }
        if self.iters <= self.burn_in {
            return invalid("iters must exceed burn_in");
        }
        if self.kept_per_chain() == 0 {
            return invalid("settings keep no draws");
        }
        Ok(())
    }
}

/// Current state of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub params: PopulationParams,
    pub latents: Vec<PatientLatents>,
}

/// One full Gibbs sweep: every patient block, then the population block.
/// Returns the name of the first parameter that became non-finite.
pub fn sweep(
    data: &CohortData,
    state: &mut GibbsState,
    config: &ModelConfig,
    proposal: &mut GammaProposal,
    rng: &mut SimRng,
) -> std::result::Result<(), &'static str> {
    for (latent, summary) in state.latents.iter_mut().zip(&data.summaries) {
        *latent = update_patient_block(summary, &state.params, rng);
        if !latent.u.iter().all(|v| v.is_finite()) {
            return Err("u");
        }
    }
    state.params =
        update_population_block(data, &state.latents, &state.params, config, proposal, rng);
    match kernels::first_non_finite(&state.params) {
        Some(name) => Err(name),
        None => Ok(()),
    }
}

fn initial_state(data: &CohortData, records: &[PatientRecord], rng: &mut SimRng) -> GibbsState {
    let (n, sum) = records
        .iter()
        .flat_map(|r| &r.psa)
        .fold((0.0, 0.0), |(n, s), o| (n + 1.0, s + o.value));
    let level = if n > 0.0 { sum / n } else { 0.0 };
    let jitter = |rng: &mut SimRng| 0.1 * (rng.random::<f64>() - 0.5);
    let params = PopulationParams {
        rho: 0.5,
        beta_age: 0.0,
        mu: [
            [level - 0.1 + jitter(rng), jitter(rng)],
            [level + 0.1 + jitter(rng), jitter(rng)],
        ],
        tau2: [[0.1, 0.01], [0.1, 0.01]],
        sigma2: 0.1,
        gamma0: -1.0,
        gamma1: 1.0,
    };
    let latents = data
        .summaries
        .iter()
        .map(|s| PatientLatents {
            eta: s
                .observed_class
                .unwrap_or_else(|| u8::from(rng.random_bool(0.5))),
            u: [level, 0.0],
        })
        .collect();
    GibbsState { params, latents }
}

struct ChainOutput {
    params: Vec<PopulationParams>,
    /// Draw-major: `draw * n + patient`.
    latents: Vec<PatientLatents>,
    acceptance: f64,
}

fn run_chain(
    chain: usize,
    data: &CohortData,
    records: &[PatientRecord],
    config: &ModelConfig,
    settings: &FitSettings,
) -> Result<ChainOutput> {
    let mut rng = rng_from(settings.seed, &[chain as u64]);
    let mut state = initial_state(data, records, &mut rng);
    let mut proposal = GammaProposal::new([0.3, 0.3]);
    let kept = settings.kept_per_chain();
    let mut params = Vec::with_capacity(kept);
    let mut latents = Vec::with_capacity(kept * data.len());
    for iter in 0..settings.iters {
        sweep(data, &mut state, config, &mut proposal, &mut rng).map_err(|parameter| {
            Error::NonFinite {
                parameter,
                chain,
                iteration: iter,
            }
        })?;
        if iter < settings.burn_in {
            if (iter + 1) % ADAPT_WINDOW == 0 {
                proposal.adapt();
            }
            if iter + 1 == settings.burn_in {
                proposal.reset_counts();
            }
            continue;
        }
        if (iter - settings.burn_in + 1).is_multiple_of(settings.thin) && params.len() < kept {
            params.push(state.params);
            latents.extend_from_slice(&state.latents);
        }
    }
    Ok(ChainOutput {
        params,
        latents,
        acceptance: proposal.acceptance_rate(),
    })
}

/// Fits the joint posterior. The cohort is canonicalized (sorted by id), so
/// the result does not depend on input order. Chains run independently on
/// per-chain seed streams and are concatenated chain-major.
pub fn fit(
    cohort: &[PatientRecord],
    config: &ModelConfig,
    settings: &FitSettings,
) -> Result<PosteriorSample> {
    if cohort.is_empty() {
        return invalid("cannot fit an empty cohort");
    }
    config.validate()?;
    settings.validate()?;
    let records = canonical_cohort(cohort)?;
    let data = CohortData::new(records.iter().map(RecordSummary::of).collect());
    let outputs: Vec<ChainOutput> = (0..settings.chains)
        .into_par_iter()
        .map(|c| run_chain(c, &data, &records, config, settings))
        .collect::<Result<_>>()?;

    let n = records.len();
    let kept = settings.kept_per_chain();
    let total = kept * settings.chains;
    let mut params = Vec::with_capacity(total);
    let mut latents = vec![
        PatientLatents {
            eta: 0,
            u: [0.0; 2]
        };
        total * n
    ];
    for (c, out) in outputs.iter().enumerate() {
        params.extend_from_slice(&out.params);
        for d in 0..kept {
            let j = c * kept + d;
            for i in 0..n {
                latents[i * total + j] = out.latents[d * n + i];
            }
        }
    }
    let meta = SampleMeta {
        chains: settings.chains,
        iters: settings.iters,
        burn_in: settings.burn_in,
        thin: settings.thin,
        seed: settings.seed,
        draws_per_chain: kept,
        data_digest: cohort_digest(&records)?,
        config: *config,
        gamma_acceptance: outputs.iter().map(|o| o.acceptance).collect(),
        cohort_file: None,
        store_digest: None,
    };
    let ids = records.into_iter().map(|r| r.id).collect();
    PosteriorSample::new(meta, ids, params, latents)
}
