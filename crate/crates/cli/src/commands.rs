use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};
use tnsde_core::causal::{
    estimate_ite, pearson, responder_split, uplift_scores, CausalError, Tercile, UpliftEntry,
};
use tnsde_core::data::{generate_cohort, load_dataset, save_dataset, DataError, Dataset};
use tnsde_core::model::{
    index_predictions, parse_predictions, predict_cohort, prediction_times, predictions_to_jsonl, PatientRequest,
    PredictionRecord, TrajectoryPrediction,
};
use tnsde_core::nets::ParamBundle;
use tnsde_core::train::{carry_forward, evaluate_factual, run_nested_cv, FoldPlan, TrainError};

use crate::config::{load_config, ArmSelection, RunConfig};
use crate::CliError;

pub const RUN_METADATA: &str = "run_metadata.json";

fn data_err(e: DataError) -> CliError {
    CliError::validation(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_)
        | TrainError::Stratification { .. }
        | TrainError::InvalidSigma(_)
        | TrainError::Coverage(_)
        | TrainError::MissingVisit { .. }
        | TrainError::NoFullRetention => CliError::validation(e.to_string()),
        other => CliError::runtime(other.to_string()),
    }
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(data_err)
}

fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read predictions {}: {e}", path.display())))?;
    parse_predictions(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_text(path, &text)
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn dataset_echo(dataset: &Dataset) -> Value {
    json!({
        "version": dataset.meta.version,
        "seed": dataset.meta.seed,
        "n_patients": dataset.meta.n_patients,
        "arms": dataset.meta.arms,
    })
}

fn pairs_message(what: &str, missing: &[(u32, usize)], dataset: &Dataset) -> String {
    let listed: Vec<String> = missing
        .iter()
        .map(|&(id, arm)| {
            let name = dataset.meta.arms.get(arm).map_or("?", |a| a.name.as_str());
            format!("(patient {id}, arm {name})")
        })
        .collect();
    format!("{what}: {} missing (patient, arm) pairs: {}", missing.len(), listed.join(", "))
}

pub fn synth(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let cohort = cfg
        .cohort
        .ok_or_else(|| CliError::validation("config field `cohort`: section is required for synth"))?;
    cohort.validate().map_err(data_err)?;
    let dataset = generate_cohort(&cohort).map_err(data_err)?;
    for w in &dataset.meta.warnings {
        warn!("{w}");
    }
    save_dataset(&dataset, out).map_err(|e| CliError::runtime(e.to_string()))?;
    info!("wrote {} patients to {}", dataset.patients.len(), out.display());
    Ok(())
}

pub fn train(config: &Path, data: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let dataset = load_data(data)?;
    // Training only ever sees the observed view.
    let cohort = dataset.observed();
    let spec = cfg.model.spec(cohort.n_arms(), dataset.meta.config.volume_shape);
    spec.validate().map_err(|e| CliError::validation(format!("config section `model`: {e}")))?;
    let cv = cfg.train.cv();
    let schedule = dataset.meta.config.schedule();
    ensure_dir(out_dir)?;

    let outcome = run_nested_cv(&cohort, &spec, &cv, &schedule).map_err(train_err)?;
    let mut folds = Vec::new();
    for f in &outcome.folds {
        let bundle = match &f.params {
            Some(params) => {
                let name = format!("fold{}.bundle", f.fold);
                let extra = json!({ "fold": f.fold, "hyper": f.chosen, "final_epochs": f.final_epochs });
                params
                    .save(&out_dir.join(&name), &extra)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                Some(name)
            }
            None => None,
        };
        folds.push(json!({
            "fold": f.fold,
            "chosen": f.chosen,
            "final_epochs": f.final_epochs,
            "scores": f.scores,
            "error": f.error,
            "bundle": bundle,
        }));
    }
    let metadata = json!({
        "command": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "dataset": dataset_echo(&dataset),
        "model_spec": spec,
        "fold_plan": outcome.plan,
        "folds": folds,
    });
    write_json(&out_dir.join(RUN_METADATA), &metadata)?;

    let failed: Vec<usize> = outcome.folds.iter().filter(|f| f.params.is_none()).map(|f| f.fold).collect();
    if failed.len() == outcome.folds.len() {
        return Err(CliError::runtime("every outer fold failed; see run_metadata.json"));
    }
    write_text(&out_dir.join("predictions.jsonl"), &predictions_to_jsonl(&outcome.predictions))?;

    let covered: Vec<u32> = outcome
        .plan
        .folds
        .iter()
        .enumerate()
        .filter(|(k, _)| !failed.contains(k))
        .flat_map(|(_, ids)| ids.iter().copied())
        .collect();
    let scored = cohort.subset(&covered);
    let table = evaluate_factual(&outcome.predictions, &scored).map_err(train_err)?;
    let baseline = carry_forward(&scored, Some(&outcome.plan)).map_err(train_err)?;
    write_text(&out_dir.join("metrics.csv"), &table.to_csv())?;
    write_text(&out_dir.join("baseline_metrics.csv"), &baseline.to_csv())?;
    let mut summary = table.summary_json();
    summary["baseline"] = baseline.summary_json();
    summary["relative_improvement"] = json!(1.0 - table.overall_mse / baseline.overall_mse);
    summary["failed_folds"] = json!(failed);
    write_json(&out_dir.join("metrics_summary.json"), &summary)?;
    info!(
        "crogged MSE {:.4} vs carry-forward {:.4}",
        table.overall_mse, baseline.overall_mse
    );
    Ok(())
}

pub struct PredictArgs {
    pub run_dir: PathBuf,
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub arms: Option<String>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

fn resolve_arms(selection: &ArmSelection, dataset: &Dataset) -> Result<Option<Vec<usize>>, CliError> {
    let lookup = |name: &str| {
        dataset
            .meta
            .arms
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| CliError::validation(format!("unknown arm `{name}`")))
    };
    match selection {
        ArmSelection::Keyword(k) if k == "all" => Ok(Some((0..dataset.meta.arms.len()).collect())),
        ArmSelection::Keyword(k) if k == "assigned" => Ok(None),
        ArmSelection::Keyword(name) => Ok(Some(vec![lookup(name)?])),
        ArmSelection::Names(names) => {
            let mut arms = names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>, _>>()?;
            arms.sort_unstable();
            arms.dedup();
            Ok(Some(arms))
        }
    }
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let meta = read_json(&args.run_dir.join(RUN_METADATA))?;
    let cfg: RunConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| CliError::validation(format!("run metadata config: {e}")))?;
    let plan: FoldPlan = serde_json::from_value(meta["fold_plan"].clone())
        .map_err(|e| CliError::validation(format!("run metadata fold plan: {e}")))?;
    let dataset = load_data(&args.data)?;
    if meta["dataset"]["seed"] != json!(dataset.meta.seed) || meta["dataset"]["n_patients"] != json!(dataset.meta.n_patients)
    {
        return Err(CliError::validation("dataset does not match the one recorded in run metadata"));
    }
    let selection = args.arms.as_deref().map_or(cfg.predict.arms.clone(), ArmSelection::parse);
    let arms = resolve_arms(&selection, &dataset)?;
    let samples = args.samples.unwrap_or(cfg.predict.samples);
    let seed = args.seed.unwrap_or(cfg.predict.seed);
    if samples == 0 {
        return Err(CliError::validation("samples must be at least 1"));
    }

    let mut bundles: BTreeMap<usize, ParamBundle> = BTreeMap::new();
    for f in meta["folds"].as_array().into_iter().flatten() {
        let (Some(k), Some(name)) = (f["fold"].as_u64(), f["bundle"].as_str()) else {
            continue;
        };
        let (params, extra) =
            ParamBundle::load(&args.run_dir.join(name)).map_err(|e| CliError::validation(e.to_string()))?;
        if extra["fold"].as_u64() != Some(k) {
            return Err(CliError::validation(format!("bundle {name} does not belong to fold {k}")));
        }
        bundles.insert(k as usize, params);
    }

    let cohort = dataset.observed();
    let schedule = dataset.meta.config.schedule();
    let unassigned: Vec<u32> = cohort.patients.iter().filter(|p| plan.fold_of(p.id).is_none()).map(|p| p.id).collect();
    if !unassigned.is_empty() {
        return Err(CliError::validation(format!(
            "patients missing from fold metadata: {unassigned:?}"
        )));
    }
    let mut requests = Vec::with_capacity(cohort.patients.len());
    let mut folds = Vec::with_capacity(cohort.patients.len());
    let mut no_model = Vec::new();
    for p in &cohort.patients {
        let fold = plan.fold_of(p.id).expect("checked above");
        // The fold-k model was fit on the other folds only.
        debug_assert!(!plan.training_ids(fold).contains(&p.id));
        let Some(params) = bundles.get(&fold) else {
            no_model.push(p.id);
            continue;
        };
        requests.push(PatientRequest {
            patient: p,
            params,
            arms: arms.clone().unwrap_or_else(|| vec![p.arm]),
            times: prediction_times(&schedule, p),
        });
        folds.push(fold);
    }
    if !no_model.is_empty() {
        return Err(CliError::runtime(format!(
            "no trained model for the fold of patients {no_model:?}"
        )));
    }
    let solver = cfg.train.solver();
    let predictions = predict_cohort(&requests, samples, seed, &solver).map_err(|e| CliError::runtime(e.to_string()))?;
    let arm_info = &dataset.meta.arms;
    let records: Vec<PredictionRecord> = predictions
        .into_iter()
        .zip(&folds)
        .flat_map(|(preds, &fold)| {
            preds
                .into_iter()
                .map(move |tp| {
                    let name = &arm_info[tp.arm].name;
                    PredictionRecord::new(tp, name, fold)
                })
        })
        .collect();
    ensure_dir(&args.out_dir)?;
    write_text(&args.out_dir.join("predictions.jsonl"), &predictions_to_jsonl(&records))?;
    write_json(
        &args.out_dir.join("predict_metadata.json"),
        &json!({
            "command": "predict",
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "dataset": dataset_echo(&dataset),
            "arms": selection,
            "samples": samples,
            "seed": seed,
            "n_records": records.len(),
        }),
    )?;
    info!("wrote {} prediction records", records.len());
    Ok(())
}

pub fn evaluate(predictions: &Path, data: &Path, out_dir: &Path) -> Result<(), CliError> {
    let records = load_predictions(predictions)?;
    let dataset = load_data(data)?;
    let cohort = dataset.observed();
    let table = evaluate_factual(&records, &cohort).map_err(|e| match e {
        TrainError::Coverage(missing) => CliError::validation(pairs_message("coverage gap", &missing, &dataset)),
        other => train_err(other),
    })?;
    let baseline = carry_forward(&cohort, None).map_err(train_err)?;
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("metrics.csv"), &table.to_csv())?;
    let mut summary = table.summary_json();
    summary["baseline"] = baseline.summary_json();
    summary["dataset"] = dataset_echo(&dataset);
    write_json(&out_dir.join("metrics_summary.json"), &summary)?;
    Ok(())
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn causal_err(e: CausalError) -> CliError {
    CliError::validation(e.to_string())
}

fn recovery(predicted: &[f64], truth: &[f64]) -> Value {
    let all_zero = truth.iter().all(|&t| t == 0.0);
    let sign = if all_zero {
        json!("undefined")
    } else {
        let nonzero: Vec<(f64, f64)> = predicted.iter().copied().zip(truth.iter().copied()).filter(|p| p.1 != 0.0).collect();
        let agree = nonzero.iter().filter(|(p, t)| p.signum() == t.signum()).count();
        json!(agree as f64 / nonzero.len() as f64)
    };
    json!({
        "n": predicted.len(),
        "pearson": pearson(predicted, truth).map_or(json!("undefined"), |r| json!(r)),
        "sign_agreement": sign,
        "mean_predicted": mean(predicted),
        "mean_true": mean(truth),
    })
}

pub fn uplift(
    predictions: &Path,
    data: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    retentions: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let mut causal = match config {
        Some(path) => load_config(path)?.causal,
        None => RunConfig::default().causal,
    };
    if let Some(r) = retentions {
        causal.retentions = r;
    }
    if causal.retentions.is_empty() {
        return Err(CliError::validation("at least one retention level is required"));
    }
    let records = load_predictions(predictions)?;
    let dataset = load_data(data)?;
    let cohort = dataset.observed();
    if cohort.n_arms() < 2 {
        return Err(CliError::validation("single-arm cohort: no counterfactual arm to compare against"));
    }
    let control = match &causal.control {
        Some(name) => cohort
            .arm_index(name)
            .ok_or_else(|| CliError::validation(format!("unknown control arm `{name}`")))?,
        None => cohort
            .control_arm()
            .ok_or_else(|| CliError::validation("cohort has no placebo arm to use as control"))?,
    };
    let index = index_predictions(&records);
    let present: BTreeSet<usize> = records.iter().map(|r| r.arm).filter(|&a| a != control).collect();
    if present.is_empty() {
        return Err(CliError::validation(
            "predictions contain no counterfactual arm; run predict with --arms all",
        ));
    }
    let ids: Vec<u32> = cohort.patients.iter().map(|p| p.id).collect();
    let missing: Vec<(u32, usize)> = std::iter::once(control)
        .chain(present.iter().copied())
        .flat_map(|a| ids.iter().map(move |&id| (id, a)))
        .filter(|k| !index.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::validation(pairs_message("coverage gap", &missing, &dataset)));
    }

    let times = dataset.meta.config.schedule();
    let baselines: BTreeMap<u32, f64> = cohort.patients.iter().map(|p| (p.id, p.covariates.baseline_edss)).collect();
    let control_preds: Vec<TrajectoryPrediction> = ids.iter().map(|&id| index[&(id, control)].prediction()).collect();
    let control_map: BTreeMap<u32, &TrajectoryPrediction> = control_preds.iter().map(|p| (p.patient_id, p)).collect();
    let truth: Option<BTreeMap<u32, &Vec<f64>>> = dataset
        .patients
        .iter()
        .map(|p| p.ground_truth().map(|g| (p.id, &g.true_ite)))
        .collect();

    ensure_dir(out_dir)?;
    let mut arm_reports = Vec::new();
    for &arm in &present {
        let name = &dataset.meta.arms[arm].name;
        let treated: Vec<TrajectoryPrediction> = ids.iter().map(|&id| index[&(id, arm)].prediction()).collect();
        let refs: Vec<&TrajectoryPrediction> = treated.iter().collect();
        let scores = uplift_scores(&refs, &control_map, &baselines, &times).map_err(causal_err)?;
        let entries = treated
            .iter()
            .zip(&scores)
            .map(|(t, s)| {
                let ite = estimate_ite(t, control_map[&t.patient_id], &times, causal.normalization)?;
                Ok(UpliftEntry {
                    patient_id: s.patient_id,
                    uplift: s.uplift,
                    confidence: ite.variance,
                })
            })
            .collect::<Result<Vec<_>, CausalError>>()
            .map_err(causal_err)?;
        let true_of = |id: u32| truth.as_ref().map(|t| t[&id][arm]);

        let mut splits = Vec::new();
        for &r in &causal.retentions {
            let report = match responder_split(&entries, r, arm) {
                Ok(report) => report,
                Err(CausalError::TooFewRetained(n)) => {
                    warn!("arm {name}, retention {r}: only {n} patients retained; skipped");
                    splits.push(json!({ "retention": r, "skipped": format!("{n} patients retained") }));
                    continue;
                }
                Err(e) => return Err(causal_err(e)),
            };
            write_text(&out_dir.join(format!("uplift_{name}_{r:.2}.csv")), &report.to_csv())?;
            let tercile_truth = |t: Tercile| -> Option<f64> {
                let v: Vec<f64> = report.ids(t).filter_map(true_of).collect();
                mean(&v)
            };
            splits.push(json!({
                "retention": r,
                "n_retained": report.assignments.len(),
                "responder_mean_uplift": report.responder_mean,
                "middle_mean_uplift": report.middle_mean,
                "non_responder_mean_uplift": report.non_responder_mean,
                "responder_mean_true_ite": tercile_truth(Tercile::Responder),
                "non_responder_mean_true_ite": tercile_truth(Tercile::NonResponder),
            }));
        }
        let uplifts: Vec<f64> = scores.iter().map(|s| s.uplift).collect();
        let recovered = truth.as_ref().map(|t| {
            let truth: Vec<f64> = ids.iter().map(|id| t[id][arm]).collect();
            recovery(&uplifts, &truth)
        });
        arm_reports.push(json!({
            "arm": name,
            "n_patients": scores.len(),
            "mean_uplift": mean(&uplifts),
            "splits": splits,
            "ite_recovery": recovered,
        }));
    }
    write_json(
        &out_dir.join("uplift_summary.json"),
        &json!({
            "command": "uplift",
            "version": env!("CARGO_PKG_VERSION"),
            "causal": causal,
            "control": dataset.meta.arms[control].name,
            "dataset": dataset_echo(&dataset),
            "arms": arm_reports,
        }),
    )?;
    Ok(())
}

fn json_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut merged = serde_json::Map::new();
    for input in inputs {
        for file in json_files(input)? {
            merged.insert(file.display().to_string(), read_json(&file)?);
        }
    }
    if merged.is_empty() {
        return Err(CliError::validation("no JSON outputs found in the given inputs"));
    }
    write_json(out, &Value::Object(merged))
}
