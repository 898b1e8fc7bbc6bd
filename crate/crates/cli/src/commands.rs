use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use latent_update::estimators::{
    conditional_posterior_estimate, grid_oracle, rao_blackwell_is_estimate, rejection_sample,
    GridSpec,
};
use latent_update::eval::{
    agreement_experiment, decade_edges, ess_deviation_points, ess_deviation_table, timing_report,
    AgreementReport, ExperimentConfig, Method,
};
use latent_update::importance::{
    dynamic_update, generate_proposals, weigh_new_patient_fixed, DynamicSettings, ProposalCache,
    UpdateTarget, WeightedProposalSet,
};
use latent_update::io::{read_json, read_jsonl, write_json, write_jsonl};
use latent_update::mcmc::{fit, summarize, FitSettings};
use latent_update::model::{ModelConfig, ObservationBlock, PatientRecord};
use latent_update::sim::{simulate_cohort, SimConfig};
use latent_update::store::{cohort_digest, PosteriorSample};
use latent_update::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult, Code};
use crate::manifest::{Artifact, ManifestEntry, WorkspaceManifest};
use crate::{
    warn, CacheArgs, Cli, Command, DynamicFlags, EvaluateArgs, FitArgs, FitFlags, OracleArgs,
    OracleMethod, PredictArgs, SimulateArgs, SummarizeArgs, Toggle, UpdateArgs,
};

pub(crate) fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let ws = cli.workspace.as_path();
    match &cli.command {
        Command::Simulate(a) => simulate(ws, argv, a),
        Command::Fit(a) => fit_store(ws, argv, a),
        Command::CacheProposals(a) => cache_proposals(ws, argv, a),
        Command::PredictNew(a) => predict_new(ws, argv, a),
        Command::UpdatePatient(a) => update_patient(ws, argv, a),
        Command::Oracle(a) => oracle(ws, argv, a),
        Command::Evaluate(a) => evaluate(ws, argv, a),
        Command::Summarize(a) => summarize_cmd(ws, a),
    }
}

/// Outputs are always new files.
fn fresh(path: &Path) -> CliResult<()> {
    if path.exists() {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn config_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("configs serialize")
}

/// Prints a JSON result and optionally saves it.
fn emit(value: &Value, out: Option<&Path>) -> CliResult<()> {
    if let Some(path) = out {
        write_json(path, value)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed reader (e.g. `| head`) is not a failure
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn fit_settings(flags: &FitFlags, seed: u64) -> FitSettings {
    FitSettings {
        chains: flags.chains,
        iters: flags.iters,
        burn_in: flags.burn_in,
        thin: flags.thin,
        seed,
    }
}

fn model_config(flags: &FitFlags) -> CliResult<ModelConfig> {
    Ok(match &flags.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    })
}

fn dynamic_settings(flags: &DynamicFlags) -> DynamicSettings {
    DynamicSettings {
        initial_m: flags.initial,
        ess_threshold: flags.ess_threshold,
        growth_factor: flags.growth,
        max_m: flags.max,
    }
}

fn simulate(ws: &Path, argv: &[String], a: &SimulateArgs) -> CliResult<()> {
    fresh(&a.out)?;
    if let Some(t) = &a.truth {
        fresh(t)?;
    }
    let mut config: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::desk(a.patients, a.seed),
    };
    config.n_patients = a.patients;
    config.seed = a.seed;
    if let Some(f) = a.frac_observed {
        config.frac_class_observed = f;
    }
    let cohort = simulate_cohort(&config)?;
    write_jsonl(&a.out, &cohort.records)?;

    let mut entry = ManifestEntry::new("simulate", argv, Some(a.seed), config_value(&config));
    if let Some(p) = &a.config {
        entry.inputs.push(Artifact::of("sim-config", p)?);
    }
    entry.outputs.push(Artifact::of("cohort", &a.out)?);
    if let Some(t) = &a.truth {
        #[derive(Serialize)]
        struct Truth<'a> {
            id: &'a str,
            eta: u8,
            u: [f64; 2],
        }
        let rows: Vec<Truth> = cohort
            .records
            .iter()
            .zip(&cohort.truth)
            .map(|(r, l)| Truth {
                id: &r.id,
                eta: l.eta,
                u: l.u,
            })
            .collect();
        write_jsonl(t, &rows)?;
        entry.outputs.push(Artifact::of("truth", t)?);
    }
    WorkspaceManifest::append(ws, entry)
}

fn fit_store(ws: &Path, argv: &[String], a: &FitArgs) -> CliResult<()> {
    fresh(&a.out)?;
    fresh(&PosteriorSample::sidecar_path(&a.out))?;
    if let Some(p) = &a.export_jsonl {
        fresh(p)?;
    }
    let records: Vec<PatientRecord> = read_jsonl(&a.cohort)?;
    let config = model_config(&a.fit)?;
    let settings = fit_settings(&a.fit, a.seed);
    let mut store = fit(&records, &config, &settings)?;
    store.meta.cohort_file = Some(fs::canonicalize(&a.cohort)?.to_string_lossy().into_owned());
    let digest = store.save(&a.out)?;
    if let Some(p) = &a.export_jsonl {
        store.export_jsonl(p)?;
    }

    let mut entry = ManifestEntry::new(
        "fit",
        argv,
        Some(a.seed),
        json!({ "model": config, "fit": settings }),
    );
    entry.inputs.push(Artifact::of("cohort", &a.cohort)?);
    if let Some(p) = &a.fit.config {
        entry.inputs.push(Artifact::of("model-config", p)?);
    }
    entry.outputs.push(Artifact::of("store", &a.out)?);
    entry.outputs.push(Artifact::of(
        "store-meta",
        &PosteriorSample::sidecar_path(&a.out),
    )?);
    if let Some(p) = &a.export_jsonl {
        entry.outputs.push(Artifact::of("store-jsonl", p)?);
    }
    WorkspaceManifest::append(ws, entry)?;
    emit(
        &json!({ "store_digest": digest, "draws": store.n_draws(), "patients": store.n_patients() }),
        None,
    )
}

fn cache_proposals(ws: &Path, argv: &[String], a: &CacheArgs) -> CliResult<()> {
    fresh(&a.out)?;
    let store = PosteriorSample::load(&a.store)?;
    let cache = generate_proposals(&store, a.per_draw, a.seed)?;
    cache.save(&a.out)?;
    let mut entry = ManifestEntry::new(
        "cache-proposals",
        argv,
        Some(a.seed),
        json!({ "per_draw": a.per_draw, "store_digest": store.digest() }),
    );
    entry.inputs.push(Artifact::of("store", &a.store)?);
    entry.outputs.push(Artifact::of("cache", &a.out)?);
    WorkspaceManifest::append(ws, entry)
}

fn update_output(set: &WeightedProposalSet) -> Value {
    if set.degenerate {
        warn(
            Code::DegenerateWeights,
            &format!(
                "ess {:.3} is below 2; the estimate rests on one proposal",
                set.ess
            ),
        );
    } else if set.capped {
        warn(
            Code::CappedEss,
            &format!(
                "ess {:.1} is below the threshold at the proposal budget",
                set.ess
            ),
        );
    }
    json!({
        "patient_id": set.patient_id,
        "risk": set.risk(),
        "risk_se": set.risk_se(),
        "ess": set.ess,
        "proposals_used": set.len(),
        "generations": set.generation,
        "capped": set.capped,
        "degenerate": set.degenerate,
        "elapsed_ms": set.elapsed_ms(),
    })
}

fn predict_new(ws: &Path, argv: &[String], a: &PredictArgs) -> CliResult<()> {
    if let Some(p) = &a.out {
        fresh(p)?;
    }
    let store = PosteriorSample::load(&a.store)?;
    let cache = ProposalCache::load(&a.cache)?;
    cache.check_store(&store)?;
    let record: PatientRecord = read_json(&a.patient)?;
    let (set, config) = if a.dynamic {
        let settings = dynamic_settings(&a.dynamic_flags);
        let target = UpdateTarget::NewPatient {
            cache: &cache,
            record: &record,
        };
        (
            dynamic_update(&store, target, &settings)?,
            json!({ "dynamic": settings }),
        )
    } else {
        let m = a.proposals.unwrap_or(cache.len());
        (
            weigh_new_patient_fixed(&cache, &store, &record, m)?,
            json!({ "proposals": m }),
        )
    };
    let value = update_output(&set);
    emit(&value, a.out.as_deref())?;

    let mut entry = ManifestEntry::new("predict-new", argv, None, config);
    entry.inputs.push(Artifact::of("store", &a.store)?);
    entry.inputs.push(Artifact::of("cache", &a.cache)?);
    entry.inputs.push(Artifact::of("patient", &a.patient)?);
    if let Some(p) = &a.out {
        entry.outputs.push(Artifact::of("prediction", p)?);
    }
    WorkspaceManifest::append(ws, entry)
}

fn update_patient(ws: &Path, argv: &[String], a: &UpdateArgs) -> CliResult<()> {
    if let Some(p) = &a.out {
        fresh(p)?;
    }
    let store = PosteriorSample::load(&a.store)?;
    let cohort_path: PathBuf = match (&a.cohort, &store.meta.cohort_file) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(CliError::Usage(
                "the store does not record its cohort; pass --cohort".into(),
            ))
        }
    };
    let records: Vec<PatientRecord> = read_jsonl(&cohort_path)?;
    let digest = cohort_digest(&records)?;
    if digest != store.meta.data_digest {
        return Err(CliError::Usage(format!(
            "cohort {} (digest {digest}) is not the data the store was fit on ({})",
            cohort_path.display(),
            store.meta.data_digest
        )));
    }
    let record = records
        .iter()
        .find(|r| r.id == a.id)
        .ok_or_else(|| Error::UnknownPatient(a.id.clone()))?;
    let block: ObservationBlock = read_json(&a.new_obs)?;
    let settings = dynamic_settings(&a.dynamic_flags);
    let target = UpdateTarget::NewObservations {
        record,
        block: &block,
    };
    let set = dynamic_update(&store, target, &settings)?;
    let value = update_output(&set);
    emit(&value, a.out.as_deref())?;

    let mut entry =
        ManifestEntry::new("update-patient", argv, None, json!({ "dynamic": settings }));
    entry.inputs.push(Artifact::of("store", &a.store)?);
    entry.inputs.push(Artifact::of("cohort", &cohort_path)?);
    entry.inputs.push(Artifact::of("new-obs", &a.new_obs)?);
    if let Some(p) = &a.out {
        entry.outputs.push(Artifact::of("prediction", p)?);
    }
    WorkspaceManifest::append(ws, entry)
}

fn oracle(ws: &Path, argv: &[String], a: &OracleArgs) -> CliResult<()> {
    if let Some(p) = &a.out {
        fresh(p)?;
    }
    let store = PosteriorSample::load(&a.store)?;
    let record: PatientRecord = read_json(&a.patient)?;
    let mut entry = ManifestEntry::new("oracle", argv, a.seed, Value::Null);
    let value = match a.method {
        OracleMethod::Rs => {
            // both are enforced by the parser
            let cache_path = a.cache.as_deref().expect("--cache is required for rs");
            let seed = a.seed.expect("--seed is required for rs");
            let cache = ProposalCache::load(cache_path)?;
            cache.check_store(&store)?;
            let m = a.proposals.unwrap_or(cache.len());
            let rs = rejection_sample(&cache, &store, &record, m, seed)?;
            entry.inputs.push(Artifact::of("cache", cache_path)?);
            entry.config = json!({ "method": "rs", "proposals": m });
            json!({
                "risk": rs.risk,
                "diagnostics": {
                    "accepted": rs.accepted.len(),
                    "proposals": m,
                    "acceptance_rate": rs.acceptance_rate,
                    "expected_acceptance": rs.expected_acceptance,
                    "risk_se": rs.risk_se,
                }
            })
        }
        OracleMethod::Wu => {
            entry.config = json!({ "method": "wu" });
            let risk = conditional_posterior_estimate(&store, &record)?;
            json!({ "risk": risk, "diagnostics": { "draws": store.n_draws() } })
        }
        OracleMethod::Rbis => {
            entry.config = json!({ "method": "rbis" });
            let rb = rao_blackwell_is_estimate(&store, &record)?;
            json!({ "risk": rb.risk, "diagnostics": { "ess": rb.ess, "draws": store.n_draws() } })
        }
        OracleMethod::Grid => {
            let spec = GridSpec {
                points: a.grid_points,
                max_draws: Some(a.grid_draws),
                ..GridSpec::default()
            };
            entry.config = json!({ "method": "grid", "grid": spec });
            let g = grid_oracle(&record, &store, &spec)?;
            json!({
                "risk": g.reweighted_risk,
                "diagnostics": {
                    "unweighted_risk": g.risk,
                    "draws_used": g.draws_used,
                    "points": spec.points,
                }
            })
        }
    };
    emit(&value, a.out.as_deref())?;
    entry.inputs.push(Artifact::of("store", &a.store)?);
    entry.inputs.push(Artifact::of("patient", &a.patient)?);
    if let Some(p) = &a.out {
        entry.outputs.push(Artifact::of("oracle", p)?);
    }
    WorkspaceManifest::append(ws, entry)
}

const REPORT_FILES: [&str; 4] = ["report.csv", "report.json", "ess_bins.json", "timing.json"];
const IS_METHODS: [Method; 3] = [Method::Is, Method::IsSmall, Method::IsLarge];

fn evaluate(ws: &Path, argv: &[String], a: &EvaluateArgs) -> CliResult<()> {
    for f in REPORT_FILES {
        fresh(&a.out.join(f))?;
    }
    let methods = a
        .methods
        .iter()
        .map(|m| Method::from_str(m.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let records: Vec<PatientRecord> = read_jsonl(&a.cohort)?;
    let config = ExperimentConfig {
        holdouts: a.holdouts,
        fit: fit_settings(&a.fit, a.seed),
        model: model_config(&a.fit)?,
        cache_per_draw: a.per_draw,
        dynamic: dynamic_settings(&a.dynamic_flags),
        small_budget: a.small_budget,
        large_budget: a.large_budget,
        methods,
        seed: a.seed,
        record_timing: a.timing == Toggle::On,
    };
    let report = agreement_experiment(&records, &config)?;
    fs::create_dir_all(&a.out)?;
    report.write(&a.out)?;
    write_json(&a.out.join("ess_bins.json"), &ess_bins(&report)?)?;
    write_json(&a.out.join("timing.json"), &timing_report(&report))?;

    let mut entry = ManifestEntry::new("evaluate", argv, Some(a.seed), config_value(&config));
    entry.inputs.push(Artifact::of("cohort", &a.cohort)?);
    if let Some(p) = &a.fit.config {
        entry.inputs.push(Artifact::of("model-config", p)?);
    }
    for f in REPORT_FILES {
        entry.outputs.push(Artifact::of("report", &a.out.join(f))?);
    }
    WorkspaceManifest::append(ws, entry)?;
    emit(&json!({ "aggregates": report.aggregates }), None)
}

fn ess_bins(report: &AgreementReport) -> CliResult<Value> {
    let points = ess_deviation_points(report, &IS_METHODS);
    if points.is_empty() {
        return Ok(json!([]));
    }
    let bins = ess_deviation_table(&points, &decade_edges(&points))?;
    Ok(config_value(&bins))
}

fn summarize_cmd(ws: &Path, a: &SummarizeArgs) -> CliResult<()> {
    if let Some(p) = &a.store {
        let store = PosteriorSample::load(p)?;
        return emit(
            &json!({
                "store_digest": store.digest(),
                "draws": store.n_draws(),
                "patients": store.n_patients(),
                "meta": store.meta,
                "params": summarize(&store),
            }),
            None,
        );
    }
    if let Some(dir) = &a.report {
        let report = AgreementReport::read(dir)?;
        return emit(
            &json!({
                "holdouts": report.rows.len(),
                "aggregates": report.aggregates,
                "ess_bins": ess_bins(&report)?,
                "timing": timing_report(&report),
            }),
            None,
        );
    }
    let checks = WorkspaceManifest::load(ws)?.verify();
    let bad = checks.iter().filter(|c| !c.ok).count();
    emit(
        &json!({ "artifacts": checks.len(), "mismatched": bad, "checks": checks }),
        None,
    )?;
    if bad > 0 {
        return Err(CliError::Usage(format!(
            "{bad} artifact(s) no longer match their recorded digest"
        )));
    }
    Ok(())
}
