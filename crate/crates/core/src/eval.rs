//! Agreement experiments: fast risk updates for held-out patients compared
//! against MCMC refits that include each patient.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    conditional_posterior_estimate, rao_blackwell_is_estimate, rejection_from_set,
};
use crate::importance::{
    dynamic_update, generate_proposals, weigh_new_patient_fixed, DynamicSettings, ProposalCache,
    UpdateTarget, WeightedProposalSet,
};
use crate::io::{read_json, write_json};
use crate::mcmc::{fit, FitSettings};
use crate::model::{ModelConfig, PatientRecord};
use crate::rng::{rng_from, sub_seed};
use crate::store::{canonical_cohort, PosteriorSample};

const SELECT_STREAM: u64 = 1;
const CACHE_STREAM: u64 = 2;
const REJECTION_STREAM: u64 = 3;

/// Root mean square difference of two probability vectors.
pub fn rmsd(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Nearest-rank `q`-quantile of `|a - b|`; `q = 1` is the maximum.
pub fn diff_quantiles(a: &[f64], b: &[f64], q: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(0.0..=1.0).contains(&q) {
        return invalid("quantile level must lie in [0, 1]");
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    d.sort_by(f64::total_cmp);
    Ok(d[nearest_rank(d.len(), q)])
}

fn nearest_rank(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n) - 1
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("probability vectors must be nonempty and of equal length");
    }
    if a.iter().chain(b).any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("probabilities must lie in [0, 1]");
    }
    Ok(())
}

/// Fast estimators compared in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Importance sampling with dynamic proposal expansion.
    Is,
    /// Importance sampling with the small fixed budget.
    IsSmall,
    /// Importance sampling with the large fixed budget.
    IsLarge,
    /// Rejection sampling on the dynamic proposal set.
    Rs,
    /// Conditional-posterior average without reweighting.
    Wu,
    /// Rao-Blackwellized importance sampling.
    Rbis,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Is,
        Method::IsSmall,
        Method::IsLarge,
        Method::Rs,
        Method::Wu,
        Method::Rbis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Is => "is",
            Method::IsSmall => "is-small",
            Method::IsLarge => "is-large",
            Method::Rs => "rs",
            Method::Wu => "wu",
            Method::Rbis => "rbis",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub holdouts: usize,
    /// Settings of the base fit; holdout refits use the same settings with
    /// a seed derived from `fit.seed` and the patient's canonical position.
    pub fit: FitSettings,
    pub model: ModelConfig,
    pub cache_per_draw: usize,
    pub dynamic: DynamicSettings,
    pub small_budget: usize,
    /// `None` weighs the whole cache.
    pub large_budget: Option<usize>,
    pub methods: Vec<Method>,
    /// Seeds holdout selection, the proposal cache and rejection sampling.
    pub seed: u64,
    /// When off, every elapsed time is recorded as zero so that reports
    /// are reproducible byte for byte.
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// 20 holdouts, 4 x 5,000 kept draws, 10 candidates per draw, and fixed
    /// budgets of 5,000 and the whole cache.
    pub fn desk(seed: u64) -> Self {
        Self {
            holdouts: 20,
            fit: FitSettings::desk(seed),
            model: ModelConfig::default(),
            cache_per_draw: 10,
            dynamic: DynamicSettings::default(),
            small_budget: 5_000,
            large_budget: None,
            methods: Method::ALL.to_vec(),
            seed,
            record_timing: true,
        }
    }

    fn validate(&self, cohort_size: usize) -> Result<()> {
        if self.holdouts == 0 || self.holdouts >= cohort_size {
            return invalid(format!(
                "holdout count must lie in [1, {}), got {}",
                cohort_size, self.holdouts
            ));
        }
        if self.cache_per_draw == 0 || self.small_budget == 0 || self.large_budget == Some(0) {
            return invalid("proposal budgets must be at least 1");
        }
        if self.methods.is_empty() {
            return invalid("at least one method is required");
        }
        self.fit.validate()?;
        self.model.validate()
    }
}

/// One holdout, in the fixed column order of the CSV report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub id: String,
    pub risk_mcmc: f64,
    pub risk_is: Option<f64>,
    pub risk_rs: Option<f64>,
    pub risk_wu: Option<f64>,
    pub ess: Option<f64>,
    pub proposals_used: Option<usize>,
    pub elapsed_ms: Option<f64>,
}

/// Outcome of one method on one holdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub id: String,
    pub method: Method,
    /// `None` when the weights were degenerate.
    pub risk: Option<f64>,
    /// Monte Carlo standard error, where the method has one.
    pub se: Option<f64>,
    pub ess: Option<f64>,
    pub proposals_used: Option<usize>,
    pub generations: Option<usize>,
    pub capped: bool,
    pub degenerate: bool,
    pub acceptance_rate: Option<f64>,
    /// Mean weight over max weight, for rejection sampling.
    pub expected_acceptance: Option<f64>,
    pub elapsed_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    /// Holdouts with a usable estimate.
    pub n: usize,
    pub rmsd: Option<f64>,
    pub max_abs_diff: Option<f64>,
    pub q99_abs_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub config: ExperimentConfig,
    pub base_store_digest: String,
    pub rows: Vec<AgreementRow>,
    pub details: Vec<MethodResult>,
    pub aggregates: Vec<MethodAggregate>,
}

/// Per-method agreement with the reference, recomputed from the per-holdout
/// results.
pub fn compute_aggregates(rows: &[AgreementRow], details: &[MethodResult]) -> Vec<MethodAggregate> {
    let mut methods: Vec<Method> = details.iter().map(|d| d.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let (est, reference): (Vec<f64>, Vec<f64>) = details
                .iter()
                .filter(|d| d.method == method)
                .filter_map(|d| {
                    let row = rows.iter().find(|r| r.id == d.id)?;
                    Some((d.risk?, row.risk_mcmc))
                })
                .unzip();
            MethodAggregate {
                method,
                n: est.len(),
                rmsd: rmsd(&est, &reference).ok(),
                max_abs_diff: diff_quantiles(&est, &reference, 1.0).ok(),
                q99_abs_diff: diff_quantiles(&est, &reference, 0.99).ok(),
            }
        })
        .collect()
}

impl AgreementReport {
    pub fn aggregate(&self, method: Method) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    pub fn results(&self, method: Method) -> impl Iterator<Item = &MethodResult> {
        self.details.iter().filter(move |d| d.method == method)
    }

    /// Writes `report.csv` (one row per holdout) and `report.json` (the
    /// whole report) into `dir`, which must exist.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        write_json(&dir.join("report.json"), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let report: Self = read_json(&dir.join("report.json"))?;
        let mut r = csv::Reader::from_path(dir.join("report.csv"))?;
        let rows: Vec<AgreementRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows != report.rows {
            return Err(Error::Format(
                "report.csv disagrees with report.json".into(),
            ));
        }
        Ok(report)
    }
}

/// Holdout positions in the canonical cohort: unlabelled patients first, in
/// seeded random order, returned sorted.
fn select_holdouts(records: &[PatientRecord], count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng_from(seed, &[SELECT_STREAM]));
    let (mut picked, labelled): (Vec<usize>, Vec<usize>) = order
        .into_iter()
        .partition(|&i| records[i].observed_class.is_none());
    picked.extend(labelled);
    picked.truncate(count);
    picked.sort_unstable();
    picked
}

struct Shared<'a> {
    config: &'a ExperimentConfig,
    base: Vec<PatientRecord>,
    store: PosteriorSample,
    cache: ProposalCache,
}

fn timed<T>(record: bool, f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    let ms = if record {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    (out, ms)
}

fn empty_result(id: &str, method: Method, elapsed_ms: f64) -> MethodResult {
    MethodResult {
        id: id.to_owned(),
        method,
        risk: None,
        se: None,
        ess: None,
        proposals_used: None,
        generations: None,
        capped: false,
        degenerate: false,
        acceptance_rate: None,
        expected_acceptance: None,
        elapsed_ms,
        error: None,
    }
}

/// A weighing outcome with degenerate weights kept as a value (the number
/// of proposals) and every other error propagated.
type Weighed = std::result::Result<WeightedProposalSet, usize>;

fn capture_degenerate(res: Result<WeightedProposalSet>) -> Result<Weighed> {
    match res {
        Ok(set) => Ok(Ok(set)),
        Err(Error::DegenerateWeights { proposals }) => Ok(Err(proposals)),
        Err(e) => Err(e),
    }
}

fn degenerate_message(proposals: usize) -> String {
    Error::DegenerateWeights { proposals }.to_string()
}

fn from_set(id: &str, method: Method, set: &Weighed, ms: f64) -> MethodResult {
    let mut r = empty_result(id, method, ms);
    match set {
        Ok(set) => {
            r.risk = Some(set.risk());
            r.se = Some(set.risk_se());
            r.ess = Some(set.ess);
            r.proposals_used = Some(set.len());
            r.generations = Some(set.generation);
            r.capped = set.capped;
            r.degenerate = set.degenerate;
        }
        Err(proposals) => {
            r.proposals_used = Some(*proposals);
            r.degenerate = true;
            r.capped = true;
            r.error = Some(degenerate_message(*proposals));
        }
    }
    r
}

fn evaluate_holdout(
    shared: &Shared,
    position: usize,
    record: &PatientRecord,
) -> Result<(AgreementRow, Vec<MethodResult>)> {
    let cfg = shared.config;
    let id = record.id.as_str();

    let mut cohort = shared.base.clone();
    cohort.push(record.clone());
    let settings = FitSettings {
        seed: sub_seed(cfg.fit.seed, 1 + position as u64),
        ..cfg.fit
    };
    let refit = fit(&cohort, &cfg.model, &settings)?;
    let index = refit
        .patient_index(id)
        .ok_or_else(|| Error::UnknownPatient(id.to_owned()))?;
    let risk_mcmc = refit.class_probability(index);
    drop(refit);

    let (store, cache) = (&shared.store, &shared.cache);
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let dynamic = if methods.contains(&Method::Is) || methods.contains(&Method::Rs) {
        let (res, ms) = timed(cfg.record_timing, || {
            dynamic_update(
                store,
                UpdateTarget::NewPatient { cache, record },
                &cfg.dynamic,
            )
        });
        Some((capture_degenerate(res)?, ms))
    } else {
        None
    };
    let mut details = Vec::with_capacity(methods.len());
    for method in methods {
        let result = match method {
            Method::Is => {
                let (set, ms) = dynamic.as_ref().expect("dynamic set is computed for is");
                from_set(id, method, set, *ms)
            }
            Method::IsSmall | Method::IsLarge => {
                let m = if method == Method::IsSmall {
                    cfg.small_budget
                } else {
                    cfg.large_budget.unwrap_or(cache.len())
                };
                let (set, ms) = timed(cfg.record_timing, || {
                    weigh_new_patient_fixed(cache, store, record, m)
                });
                from_set(id, method, &capture_degenerate(set)?, ms)
            }
            Method::Rs => {
                let (set, _) = dynamic.as_ref().expect("dynamic set is computed for rs");
                let seed = sub_seed(sub_seed(cfg.seed, REJECTION_STREAM), position as u64);
                let mut r = empty_result(id, method, 0.0);
                match set {
                    Ok(set) => {
                        let (rs, ms) = timed(cfg.record_timing, || rejection_from_set(set, seed));
                        let rs = rs?;
                        r.risk = Some(rs.risk);
                        r.se = Some(rs.risk_se);
                        r.proposals_used = Some(set.len());
                        r.acceptance_rate = Some(rs.acceptance_rate);
                        r.expected_acceptance = Some(rs.expected_acceptance);
                        r.elapsed_ms = ms;
                    }
                    Err(proposals) => {
                        r.degenerate = true;
                        r.error = Some(degenerate_message(*proposals));
                    }
                }
                r
            }
            Method::Wu => {
                let (risk, ms) = timed(cfg.record_timing, || {
                    conditional_posterior_estimate(store, record)
                });
                let mut r = empty_result(id, method, ms);
                r.risk = Some(risk?);
                r
            }
            Method::Rbis => {
                let (rb, ms) = timed(cfg.record_timing, || {
                    rao_blackwell_is_estimate(store, record)
                });
                let mut r = empty_result(id, method, ms);
                match rb {
                    Ok(rb) => {
                        r.risk = Some(rb.risk);
                        r.ess = Some(rb.ess);
                        r.proposals_used = Some(store.n_draws());
                    }
                    Err(Error::DegenerateWeights { proposals }) => {
                        r.degenerate = true;
                        r.error = Some(degenerate_message(proposals));
                    }
                    Err(e) => return Err(e),
                }
                r
            }
        };
        details.push(result);
    }

    let find = |m: Method| details.iter().find(|d| d.method == m);
    let is = find(Method::Is);
    let row = AgreementRow {
        id: id.to_owned(),
        risk_mcmc,
        risk_is: is.and_then(|d| d.risk),
        risk_rs: find(Method::Rs).and_then(|d| d.risk),
        risk_wu: find(Method::Wu).and_then(|d| d.risk),
        ess: is.and_then(|d| d.ess),
        proposals_used: is.and_then(|d| d.proposals_used),
        elapsed_ms: is.map(|d| d.elapsed_ms),
    };
    Ok((row, details))
}

/// Fits the base cohort (everything but the holdouts), then scores every
/// requested method on every holdout against an MCMC refit of base cohort
/// plus that holdout. Deterministic given the configuration.
pub fn agreement_experiment(
    cohort: &[PatientRecord],
    config: &ExperimentConfig,
) -> Result<AgreementReport> {
    config.validate(cohort.len())?;
    let records = canonical_cohort(cohort)?;
    let holdouts = select_holdouts(&records, config.holdouts, config.seed);
    let base: Vec<PatientRecord> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| holdouts.binary_search(i).is_err())
        .map(|(_, r)| r.clone())
        .collect();
    let store = fit(&base, &config.model, &config.fit)?;
    let cache = generate_proposals(
        &store,
        config.cache_per_draw,
        sub_seed(config.seed, CACHE_STREAM),
    )?;
    let shared = Shared {
        config,
        base,
        store,
        cache,
    };
    let results: Vec<(AgreementRow, Vec<MethodResult>)> = holdouts
        .par_iter()
        .map(|&k| evaluate_holdout(&shared, k, &records[k]))
        .collect::<Result<_>>()?;
    let (rows, details): (Vec<AgreementRow>, Vec<Vec<MethodResult>>) = results.into_iter().unzip();
    let details: Vec<MethodResult> = details.into_iter().flatten().collect();
    let aggregates = compute_aggregates(&rows, &details);
    Ok(AgreementReport {
        config: config.clone(),
        base_store_digest: shared.store.digest(),
        rows,
        details,
        aggregates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_abs_deviation: Option<f64>,
}

/// `(ess, |risk - reference|)` for every result of the given methods that
/// carries an ESS.
pub fn ess_deviation_points(report: &AgreementReport, methods: &[Method]) -> Vec<(f64, f64)> {
    report
        .details
        .iter()
        .filter(|d| methods.contains(&d.method))
        .filter_map(|d| {
            let row = report.rows.iter().find(|r| r.id == d.id)?;
            Some((d.ess?, (d.risk? - row.risk_mcmc).abs()))
        })
        .collect()
}

/// One bin per decade, covering every point.
pub fn decade_edges(points: &[(f64, f64)]) -> Vec<f64> {
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0) {
        return vec![1.0, 10.0];
    }
    let first = lo.log10().floor() as i32;
    let last = (hi.log10().floor() as i32 + 1).max(first + 1);
    (first..=last).map(|k| 10f64.powi(k)).collect()
}

/// Mean absolute deviation per ESS bin `[edges[k], edges[k+1])`; the last
/// bin also includes its upper edge.
pub fn ess_deviation_table(points: &[(f64, f64)], edges: &[f64]) -> Result<Vec<EssBin>> {
    if points.is_empty() {
        return invalid("no (ess, deviation) points to bin");
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return invalid("bin edges must be increasing with at least two entries");
    }
    let nbins = edges.len() - 1;
    Ok((0..nbins)
        .map(|k| {
            let (lo, hi) = (edges[k], edges[k + 1]);
            let members: Vec<f64> = points
                .iter()
                .filter(|(e, _)| *e >= lo && (*e < hi || (k + 1 == nbins && *e == hi)))
                .map(|p| p.1)
                .collect();
            EssBin {
                lo,
                hi,
                count: members.len(),
                mean_abs_deviation: (!members.is_empty())
                    .then(|| members.iter().sum::<f64>() / members.len() as f64),
            }
        })
        .collect())
}

/// Adjacent increases in mean deviation across nonempty bins.
pub fn count_inversions(bins: &[EssBin]) -> usize {
    let means: Vec<f64> = bins.iter().filter_map(|b| b.mean_abs_deviation).collect();
    means.windows(2).filter(|w| w[1] > w[0]).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub method: Method,
    pub n: usize,
    pub min: f64,
    pub q25: f64,
    pub q75: f64,
    pub max: f64,
}

/// Per-method min, interquartile range and max of elapsed time.
pub fn timing_report(report: &AgreementReport) -> Vec<TimingSummary> {
    let mut methods: Vec<Method> = report.details.iter().map(|d| d.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let mut t: Vec<f64> = report.results(method).map(|d| d.elapsed_ms).collect();
            t.sort_by(f64::total_cmp);
            let at = |q: f64| t[nearest_rank(t.len(), q)];
            TimingSummary {
                method,
                n: t.len(),
                min: t[0],
                q25: at(0.25),
                q75: at(0.75),
                max: t[t.len() - 1],
            }
        })
        .collect()
}
