//! The batch commands behind the `bssad` binary.
//!
//! Each command loads and validates its whole configuration before touching
//! any output path, and writes its outputs only once every computation has
//! succeeded. On success it returns the summary printed to stdout.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use crate::anomaly::{
    best_threshold_search, read_scores_csv, report_json, score_series, write_scores_csv, Metric, ScoreSeries,
    ThresholdSearchResult,
};
use crate::config::{load_synth_config, Assignment, RunConfig};
use crate::error::{Error, Result};
use crate::filters::{run_filter, write_beliefs_csv, FilterKind, FilterParams, FilterRun, NeuralSystem};
use crate::neural::{load_bundle, save_bundle, train, ModelBundle};
use crate::timeseries::{
    apply_normalizer, fit_normalizer_named, load_csv, split, synth_generate, write_csv, Dataset, SplitSpec,
};

/// Label column picked when none is given and the header has one.
pub const DEFAULT_LABEL_COLUMN: &str = "label";

/// Config file plus `--key value` overrides.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub config: Option<PathBuf>,
    pub overrides: Vec<Assignment>,
}

impl Settings {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

/// Where `synth` writes the train/test slices, if asked to.
#[derive(Debug, Clone)]
pub struct SplitOutputs {
    pub train: PathBuf,
    pub test: PathBuf,
    /// First row of the test slice.
    pub at: usize,
}

/// Optional belief export of `detect`.
#[derive(Debug, Clone)]
pub struct BeliefOutput {
    pub path: PathBuf,
    pub covariance: bool,
}

/// Print the summary or the error and map to a process exit code.
pub fn report_outcome(outcome: Result<String>) -> i32 {
    match outcome {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn header_has(path: &Path, column: &str) -> Result<bool> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(headers.iter().any(|h| h == column))
}

/// Load a CSV, using `label_column` if given, else a `label` column when the
/// header has one.
pub fn load_dataset(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    match label_column {
        Some(name) => load_csv(path, Some(name)),
        None if header_has(path, DEFAULT_LABEL_COLUMN)? => load_csv(path, Some(DEFAULT_LABEL_COLUMN)),
        None => load_csv(path, None),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn anomaly_summary(ds: &Dataset) -> (usize, f64) {
    let n = ds.labels().map_or(0, |l| l.iter().filter(|&&x| x).count());
    let frac = if ds.is_empty() { 0.0 } else { n as f64 / ds.len() as f64 };
    (n, frac)
}

pub fn cmd_synth(config: Option<&Path>, overrides: &[Assignment], out: &Path, split_out: Option<&SplitOutputs>) -> Result<String> {
    let cfg = load_synth_config(config, overrides)?;
    if let Some(s) = split_out {
        if s.at == 0 || s.at >= cfg.length {
            return Err(Error::Config(format!("split point {} not inside 1..{}", s.at, cfg.length)));
        }
        if let Some(seg) = cfg.anomaly_segments.iter().find(|seg| seg.start < s.at) {
            return Err(Error::Config(format!(
                "segment ({}, {}, {}) starts before split point {}, the train slice would not be normal-only",
                seg.start,
                seg.length,
                seg.kind.name(),
                s.at
            )));
        }
    }
    let data = synth_generate(&cfg)?;
    let (n_anom, frac) = anomaly_summary(&data);
    write_csv(&data, out)?;
    let mut summary = format!(
        "T={} M={} anomalous={} anomaly_fraction={:.6}",
        data.len(),
        data.num_features(),
        n_anom,
        frac
    );
    if let Some(s) = split_out {
        let train_part = data.slice_rows(0, s.at)?;
        let test_part = data.slice_rows(s.at, data.len())?;
        write_csv(&train_part, &s.train)?;
        write_csv(&test_part, &s.test)?;
        summary.push_str(&format!(" train_rows={} test_rows={}", train_part.len(), test_part.len()));
    }
    Ok(summary)
}

pub fn cmd_train(train_csv: &Path, label_column: Option<&str>, settings: &Settings, model_out: &Path) -> Result<String> {
    let cfg = settings.run_config()?;
    let data = load_dataset(train_csv, label_column)?;
    let (train_part, val_part) = split(
        &data,
        &SplitSpec {
            validation_fraction: cfg.validation_fraction,
            window: cfg.tau,
        },
    )?;
    // The file name only, so the model does not depend on the working directory.
    let fitted_on = train_csv
        .file_name()
        .map_or_else(|| train_csv.display().to_string(), |n| n.to_string_lossy().into_owned());
    let stats = fit_normalizer_named(&train_part, &fitted_on)?;
    let train_n = apply_normalizer(&train_part, &stats)?;
    let val_n = apply_normalizer(&val_part, &stats)?;
    let outcome = train(&train_n, &val_n, &cfg.hyperparameters(), cfg.seed)?;
    let bundle = ModelBundle {
        model: outcome.model,
        noise: outcome.noise,
        normalizer: Some(stats),
        feature_names: Some(data.feature_names().to_vec()),
    };
    save_bundle(&bundle, model_out)?;
    let final_loss = outcome
        .loss_history
        .last()
        .map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"));
    Ok(format!(
        "epochs={} train_rows={} validation_rows={} final_loss={} trace_Q={:.6e} trace_R={:.6e}",
        cfg.epochs,
        train_part.len(),
        val_part.len(),
        final_loss,
        bundle.noise.q.trace(),
        bundle.noise.r.trace()
    ))
}

/// Check the test schema against the training one and normalize.
fn prepare_test_data(bundle: &ModelBundle, data: &Dataset) -> Result<Dataset> {
    let m = bundle.model.dims.sensors;
    if data.num_features() != m {
        return Err(Error::Shape(format!(
            "test data has {} features, model was trained on {m}",
            data.num_features()
        )));
    }
    if let Some(names) = &bundle.feature_names {
        if names.as_slice() != data.feature_names() {
            return Err(Error::Shape(format!(
                "test columns {:?} do not match training columns {:?}",
                data.feature_names(),
                names
            )));
        }
    }
    match &bundle.normalizer {
        Some(stats) => apply_normalizer(data, stats),
        None => Ok(data.clone()),
    }
}

struct Detection {
    run: FilterRun,
    scores: ScoreSeries,
}

fn detect(bundle: &ModelBundle, data: &Dataset, params: &FilterParams, seed: u64) -> Result<Detection> {
    let system = NeuralSystem::new(&bundle.model, &bundle.noise)?;
    let run = run_filter(&system, data, params, seed)?;
    let scores = score_series(data, &run.beliefs, run.offset)?;
    Ok(Detection { run, scores })
}

fn aligned_labels(data: &Dataset, scores: &ScoreSeries) -> Result<Option<Vec<bool>>> {
    data.labels()
        .map(|l| scores.aligned_labels(l).map(<[bool]>::to_vec))
        .transpose()
}

pub fn cmd_detect(
    test_csv: &Path,
    model: &Path,
    label_column: Option<&str>,
    settings: &Settings,
    scores_out: &Path,
    beliefs_out: Option<&BeliefOutput>,
) -> Result<String> {
    let cfg = settings.run_config()?;
    let bundle = load_bundle(model)?;
    let raw = load_dataset(test_csv, label_column)?;
    let data = prepare_test_data(&bundle, &raw)?;
    let params = cfg.filter_params();
    let det = detect(&bundle, &data, &params, cfg.seed)?;
    let labels = aligned_labels(&data, &det.scores)?;
    write_scores_csv(&det.scores, labels.as_deref(), scores_out)?;
    if let Some(b) = beliefs_out {
        write_beliefs_csv(&det.run, &b.path, b.covariance)?;
    }
    let mut summary = format!(
        "filter={} size={} scored={} first_t={}",
        params.kind,
        params.size(),
        det.scores.len(),
        det.scores.offset
    );
    if !det.run.reset_steps.is_empty() {
        summary.push_str(&format!(" weight_resets={}", det.run.reset_steps.len()));
    }
    Ok(summary)
}

fn summary_line(r: &ThresholdSearchResult) -> String {
    format!(
        "metric={} best_threshold={} f1={:.4} mcc={:.4}",
        r.metric,
        if r.best_threshold.is_finite() {
            format!("{:.6}", r.best_threshold)
        } else {
            "inf".into()
        },
        r.best_f1,
        r.best_mcc
    )
}

fn to_pretty(value: &serde_json::Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_eval(scores_csv: &Path, settings: &Settings, report_out: &Path) -> Result<String> {
    let cfg = settings.run_config()?;
    let file = read_scores_csv(scores_csv)?;
    let labels = file.labels.ok_or_else(|| {
        Error::Precondition(format!("{} has no label column to evaluate against", scores_csv.display()))
    })?;
    let result = best_threshold_search(&file.series, &labels, cfg.metric)?;
    write_text(report_out, &to_pretty(&report_json(&result, &cfg.echo()))?)?;
    Ok(summary_line(&result))
}

#[derive(Debug)]
struct PairOutcome {
    seed: u64,
    size: usize,
    result: Result<ThresholdSearchResult>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    test_csv: &Path,
    model: &Path,
    label_column: Option<&str>,
    settings: &Settings,
    seeds: &[u64],
    sizes: &[usize],
    report_out: &Path,
) -> Result<String> {
    let cfg = settings.run_config()?;
    if seeds.is_empty() || sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one size".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s < 2) {
        return Err(Error::Config(format!("size {bad} must be at least 2")));
    }
    let bundle = load_bundle(model)?;
    let raw = load_dataset(test_csv, label_column)?;
    let data = prepare_test_data(&bundle, &raw)?;
    if data.labels().is_none() {
        return Err(Error::Precondition(format!(
            "{} has no label column to evaluate against",
            test_csv.display()
        )));
    }

    let pairs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&seed| sizes.iter().map(move |&size| (seed, size)))
        .collect();
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|&(seed, size)| {
            let mut params = cfg.filter_params();
            match params.kind {
                FilterKind::Enkf => params.n_sigma = size,
                FilterKind::Pf => params.n_particles = size,
            }
            let result = detect(&bundle, &data, &params, seed).and_then(|det| {
                let labels = aligned_labels(&data, &det.scores)?.expect("labels checked above");
                best_threshold_search(&det.scores, &labels, cfg.metric)
            });
            PairOutcome { seed, size, result }
        })
        .collect();

    let key = |r: &ThresholdSearchResult| match cfg.metric {
        Metric::F1 => r.best_f1,
        Metric::Mcc => r.best_mcc,
    };
    let mut best: Option<(&PairOutcome, &ThresholdSearchResult)> = None;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(r) => {
                if best.is_none_or(|(_, b)| key(r) > key(b)) {
                    best = Some((o, r));
                }
                rows.push(json!({
                    "seed": o.seed,
                    "size": o.size,
                    "status": "ok",
                    "best_threshold": threshold_json(r.best_threshold),
                    "f1": r.best_f1,
                    "mcc": r.best_mcc,
                }));
            }
            Err(e) => {
                rows.push(json!({
                    "seed": o.seed,
                    "size": o.size,
                    "status": "failed",
                    "error": e.to_string(),
                }));
                failures.push(json!({ "seed": o.seed, "size": o.size, "error": e.to_string() }));
            }
        }
    }
    let best_json = best.map(|(o, r)| {
        json!({
            "seed": o.seed,
            "size": o.size,
            "best_threshold": threshold_json(r.best_threshold),
            "f1": r.best_f1,
            "mcc": r.best_mcc,
        })
    });
    let report = json!({
        "filter": cfg.filter.name(),
        "metric": cfg.metric.name(),
        "rows": rows,
        "best": best_json,
        "failures": failures,
        "config": cfg.echo(),
    });
    write_text(report_out, &to_pretty(&report)?)?;

    let first_failure = outcomes.iter().find_map(|o| o.result.as_ref().err());
    match (best, first_failure) {
        (_, Some(e)) => {
            eprintln!("{} of {} pairs failed", failures.len(), outcomes.len());
            Err(clone_for_exit(e))
        }
        (Some((o, r)), None) => Ok(format!(
            "pairs={} best_seed={} best_size={} f1={:.4} mcc={:.4}",
            outcomes.len(),
            o.seed,
            o.size,
            r.best_f1,
            r.best_mcc
        )),
        (None, None) => unreachable!("at least one pair ran"),
    }
}

fn threshold_json(th: f64) -> serde_json::Value {
    if th.is_finite() {
        json!(th)
    } else {
        json!("inf")
    }
}

/// Errors are not `Clone` (they may hold an `io::Error`); rebuild one that
/// keeps the message and exit code.
fn clone_for_exit(e: &Error) -> Error {
    let msg = format!("sweep pair failed: {e}");
    match e.exit_code() {
        2 => Error::Precondition(msg),
        4 => Error::Numerical(msg),
        _ => Error::Csv(msg),
    }
}
