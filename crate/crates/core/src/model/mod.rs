//! The hierarchical latent-class model: population parameters, patient
//! latents and records, and exact log-density evaluation.

mod density;
mod params;
mod record;

pub use density::{
    log_add_exp, log_bernoulli_logit, log_latent_density, log_obs_likelihood, log_prior,
    logistic_of_diff, marginal_class_loglik, normal_logpdf, sample_latents, softplus, Gaussian2,
    RecordSummary,
};
pub use params::{
    ModelConfig, PatientLatents, PopulationParams, PARAM_LAYOUT, POINT_MASS_VARIANCE,
};
pub use record::{BiopsyObs, ObservationBlock, PatientRecord, PsaObs};
