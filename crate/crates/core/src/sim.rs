//! Synthetic cohorts drawn from the model itself.

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{
    sample_latents, BiopsyObs, PatientLatents, PatientRecord, PopulationParams, PsaObs,
};
use crate::rng::rng_from;

/// Logits are clamped to this magnitude before simulating biopsy outcomes.
pub const LOGIT_CLAMP: f64 = 700.0;

/// PSA visits are jittered uniformly within +-1 month of the grid.
pub const PSA_JITTER_YEARS: f64 = 1.0 / 12.0;

/// A regular visit grid. Per-patient visit counts are uniform on
/// `1..=2*mean_count-1` for PSA and `0..=2*mean_count` for biopsies, so
/// `mean_count` is the expected number of visits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitSchedule {
    pub mean_count: u32,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_patients: usize,
    pub params: PopulationParams,
    pub psa_visits: VisitSchedule,
    pub biopsy_visits: VisitSchedule,
    pub frac_class_observed: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Desk-scale defaults. The parameter values are experimental knobs,
    /// not estimates from any real cohort.
    pub fn desk(n_patients: usize, seed: u64) -> Self {
        Self {
            n_patients,
            params: PopulationParams {
                rho: 0.3,
                beta_age: 0.1,
                mu: [[1.0, 0.05], [1.4, 0.2]],
                tau2: [[0.25, 0.0025], [0.25, 0.0025]],
                sigma2: 0.09,
                gamma0: -2.5,
                gamma1: 1.5,
            },
            psa_visits: VisitSchedule {
                mean_count: 8,
                spacing: 0.5,
            },
            biopsy_visits: VisitSchedule {
                mean_count: 2,
                spacing: 1.0,
            },
            frac_class_observed: 0.2,
            age_mean: 0.0,
            age_sd: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return invalid("n_patients must be at least 1");
        }
        self.params.validate_generative()?;
        if !(0.0..=1.0).contains(&self.frac_class_observed) {
            return invalid("frac_class_observed must lie in [0, 1]");
        }
        if !(self.age_sd >= 0.0 && self.age_sd.is_finite() && self.age_mean.is_finite()) {
            return invalid("age distribution needs a finite mean and sd >= 0");
        }
        if self.psa_visits.mean_count == 0 {
            return invalid("psa mean_count must be at least 1");
        }
        if !(self.psa_visits.spacing > 2.0 * PSA_JITTER_YEARS) {
            return invalid("psa spacing must exceed the two-month jitter window");
        }
        if !(self.biopsy_visits.spacing > 0.0 && self.biopsy_visits.spacing.is_finite()) {
            return invalid("biopsy spacing must be positive");
        }
        Ok(())
    }
}

/// Simulated records with their true latents, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub truth: Vec<PatientLatents>,
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:05}")
}

fn simulate_psa<R: Rng + ?Sized>(
    age_std: f64,
    latents: &PatientLatents,
    params: &PopulationParams,
    time: f64,
    rng: &mut R,
) -> PsaObs {
    let z: f64 = rng.sample(StandardNormal);
    let mean = params.beta_age * age_std + latents.u[0] + latents.u[1] * time;
    PsaObs {
        time,
        value: mean + params.sigma2.sqrt() * z,
    }
}

fn simulate_biopsy<R: Rng + ?Sized>(
    latents: &PatientLatents,
    params: &PopulationParams,
    time: f64,
    rng: &mut R,
) -> BiopsyObs {
    let logit = params
        .biopsy_logit(latents.eta)
        .clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let p = 1.0 / (1.0 + (-logit).exp());
    BiopsyObs {
        time,
        result: u8::from(rng.random::<f64>() < p),
    }
}

fn simulate_patient(config: &SimConfig, index: usize) -> (PatientRecord, PatientLatents) {
    let mut rng = rng_from(config.seed, &[index as u64]);
    let params = &config.params;
    let z: f64 = rng.sample(StandardNormal);
    let age_std = config.age_mean + config.age_sd * z;
    let latents = sample_latents(params, &mut rng);

    let n_psa = rng.random_range(1..=2 * config.psa_visits.mean_count - 1);
    let mut psa_times: Vec<f64> = (0..n_psa)
        .map(|k| {
            let grid = f64::from(k) * config.psa_visits.spacing;
            if k == 0 {
                grid
            } else {
                grid + rng.random_range(-PSA_JITTER_YEARS..PSA_JITTER_YEARS)
            }
        })
        .collect();
    psa_times.sort_by(f64::total_cmp);
    let psa = psa_times
        .into_iter()
        .map(|t| simulate_psa(age_std, &latents, params, t, &mut rng))
        .collect();

    let n_biopsy = rng.random_range(0..=2 * config.biopsy_visits.mean_count);
    let biopsies = (1..=n_biopsy)
        .map(|k| {
            let t = f64::from(k) * config.biopsy_visits.spacing;
            simulate_biopsy(&latents, params, t, &mut rng)
        })
        .collect();

    let observed_class = rng
        .random_bool(config.frac_class_observed)
        .then_some(latents.eta);
    let record = PatientRecord {
        id: patient_id(index),
        age_std,
        psa,
        biopsies,
        observed_class,
    };
    (record, latents)
}

/// Draws a cohort. Each patient uses its own sub-stream of the seed, so the
/// result does not depend on how generation is scheduled.
pub fn simulate_cohort(config: &SimConfig) -> Result<Cohort> {
    config.validate()?;
    let (records, truth) = (0..config.n_patients)
        .into_par_iter()
        .map(|i| simulate_patient(config, i))
        .unzip();
    Ok(Cohort { records, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    Psa,
    Biopsy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledVisit {
    pub time: f64,
    pub kind: ObsKind,
}

/// Simulates fresh observations at `visits` for a patient with known latents
/// and returns the extended record. The input record is left untouched.
pub fn append_observations(
    record: &PatientRecord,
    latents: &PatientLatents,
    params: &PopulationParams,
    visits: &[ScheduledVisit],
    seed: u64,
) -> Result<PatientRecord> {
    record.validate()?;
    params.validate_generative()?;
    let mut last_psa = record.last_psa_time();
    let mut last_biopsy = record.last_biopsy_time();
    for v in visits {
        let last = match v.kind {
            ObsKind::Psa => &mut last_psa,
            ObsKind::Biopsy => &mut last_biopsy,
        };
        if !(v.time.is_finite() && v.time >= *last) {
            return invalid(format!(
                "new {:?} visit at {} precedes existing data at {}",
                v.kind, v.time, *last
            ));
        }
        *last = v.time;
    }
    let mut rng = rng_from(seed, &[]);
    let mut out = record.clone();
    for v in visits {
        match v.kind {
            ObsKind::Psa => out.psa.push(simulate_psa(
                record.age_std,
                latents,
                params,
                v.time,
                &mut rng,
            )),
            ObsKind::Biopsy => out
                .biopsies
                .push(simulate_biopsy(latents, params, v.time, &mut rng)),
        }
    }
    Ok(out)
}
