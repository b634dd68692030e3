use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{ConfusionMatrix, ScoreSeries, ThresholdSearchResult};
use crate::error::{Error, Result};

/// Contents of a score CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub series: ScoreSeries,
    pub labels: Option<Vec<bool>>,
}

/// Columns `t, score` plus `label` when labels are given (aligned with the
/// scores).
pub fn write_scores_csv(series: &ScoreSeries, labels: Option<&[bool]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(l) = labels {
        if l.len() != series.len() {
            return Err(Error::Shape(format!("{} labels for {} scores", l.len(), series.len())));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match labels {
        Some(_) => writeln!(out, "t,score,label"),
        None => writeln!(out, "t,score"),
    }
    .map_err(io)?;
    for (k, s) in series.scores.iter().enumerate() {
        let t = series.offset + k;
        match labels {
            Some(l) => writeln!(out, "{t},{s},{}", u8::from(l[k])),
            None => writeln!(out, "{t},{s}"),
        }
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoreFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let t_col = col("t").ok_or_else(|| Error::Csv(format!("{}: missing column \"t\"", path.display())))?;
    let s_col = col("score").ok_or_else(|| Error::Csv(format!("{}: missing column \"score\"", path.display())))?;
    let l_col = col("label");

    let mut offset = None;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv(format!("row {row}: {e}")))?;
        let cell = |c: usize, name: &str| -> Result<&str> {
            rec.get(c).map(str::trim).ok_or_else(|| Error::Cell {
                row,
                column: name.into(),
                message: "missing value".into(),
            })
        };
        let bad = |name: &str, msg: String| Error::Cell {
            row,
            column: name.into(),
            message: msg,
        };
        let t: usize = cell(t_col, "t")?
            .parse()
            .map_err(|_| bad("t", "not a timestep index".into()))?;
        let expected = offset.map_or(t, |o: usize| o + scores.len());
        if t != expected {
            return Err(bad("t", format!("expected timestep {expected}, found {t}")));
        }
        offset.get_or_insert(t);
        let s: f64 = cell(s_col, "score")?
            .parse()
            .map_err(|_| bad("score", "not a number".into()))?;
        if !(s.is_finite() && s >= 0.0) {
            return Err(bad("score", format!("score {s} must be finite and non-negative")));
        }
        scores.push(s);
        if let Some(c) = l_col {
            labels.push(match cell(c, "label")? {
                "0" => false,
                "1" => true,
                other => return Err(bad("label", format!("label {other:?} is not 0 or 1"))),
            });
        }
    }
    Ok(ScoreFile {
        series: ScoreSeries {
            scores,
            offset: offset.unwrap_or(0),
        },
        labels: l_col.map(|_| labels),
    })
}

fn threshold_value(th: f64) -> Value {
    if th.is_finite() {
        json!(th)
    } else {
        json!("inf")
    }
}

fn confusion_value(cm: &ConfusionMatrix) -> Value {
    json!({ "tp": cm.tp, "fp": cm.fp, "fn": cm.fn_, "tn": cm.tn })
}

/// JSON evaluation report. An infinite threshold is written as `"inf"`.
pub fn report_json(result: &ThresholdSearchResult, config: &BTreeMap<String, String>) -> Value {
    let table: Vec<Value> = result
        .table
        .iter()
        .map(|row| {
            json!({
                "threshold": threshold_value(row.threshold),
                "f1": row.f1,
                "mcc": row.mcc,
            })
        })
        .collect();
    json!({
        "metric": result.metric.name(),
        "best_threshold": threshold_value(result.best_threshold),
        "best_f1": result.best_f1,
        "best_mcc": result.best_mcc,
        "confusion": confusion_value(&result.best_confusion),
        "evaluated_points": result.best_confusion.total(),
        "table": table,
        "config": config,
    })
}
