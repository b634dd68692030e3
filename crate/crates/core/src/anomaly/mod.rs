//! Anomaly scoring and point-adjusted evaluation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filters::GaussianBelief;
use crate::linalg::{symmetrize, with_jitter, JITTER};
use crate::timeseries::Dataset;

mod report;

pub use report::{read_scores_csv, report_json, write_scores_csv, ScoreFile};

/// `sqrt((x - mu)^T (P + jitter I)^-1 (x - mu))`.
pub fn mahalanobis(x: &DVector<f64>, belief: &GaussianBelief) -> Result<f64> {
    if x.len() != belief.dim() || belief.covariance.shape() != (x.len(), x.len()) {
        return Err(Error::Shape(format!(
            "observation of length {} against a belief of dimension {}",
            x.len(),
            belief.dim()
        )));
    }
    let d = x - &belief.mean;
    let p = with_jitter(&belief.covariance);
    let d2 = match p.clone().cholesky() {
        Some(chol) => d.dot(&chol.solve(&d)),
        None => {
            let mut s = p;
            symmetrize(&mut s);
            let eig = SymmetricEigen::new(s);
            let proj = eig.eigenvectors.transpose() * &d;
            proj.iter()
                .zip(eig.eigenvalues.iter())
                .map(|(c, l)| c * c / l.max(JITTER))
                .sum()
        }
    };
    if !d2.is_finite() {
        return Err(Error::Numerical("non-finite Mahalanobis distance".into()));
    }
    Ok(d2.max(0.0).sqrt())
}

/// Scores for timesteps `offset .. offset + scores.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub offset: usize,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Labels of the scored range, taken from a full-length label vector.
    pub fn aligned_labels<'a>(&self, labels: &'a [bool]) -> Result<&'a [bool]> {
        let end = self.offset + self.scores.len();
        if labels.len() < end {
            return Err(Error::Shape(format!(
                "{} labels do not cover scored timesteps {}..{end}",
                labels.len(),
                self.offset
            )));
        }
        Ok(&labels[self.offset..end])
    }
}

pub fn score_series(xs: &Dataset, beliefs: &[GaussianBelief], tau: usize) -> Result<ScoreSeries> {
    let expected = xs.len().saturating_sub(tau);
    if beliefs.len() != expected {
        return Err(Error::Shape(format!(
            "{} beliefs for a series of length {} with window {tau}, expected {expected}",
            beliefs.len(),
            xs.len()
        )));
    }
    let scores = beliefs
        .iter()
        .enumerate()
        .map(|(k, b)| mahalanobis(&xs.row(tau + k), b).map_err(|e| Error::at_step(tau + k, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSeries { scores, offset: tau })
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} predictions against {b} labels")));
    }
    Ok(())
}

/// Flag a whole labelled run when any point inside it is flagged.
pub fn point_adjust(predictions: &[bool], labels: &[bool]) -> Result<Vec<bool>> {
    check_lengths("point adjustment", predictions.len(), labels.len())?;
    let mut out = predictions.to_vec();
    let mut start = 0;
    while start < labels.len() {
        if !labels[start] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < labels.len() && labels[end] {
            end += 1;
        }
        if predictions[start..end].iter().any(|&p| p) {
            out[start..end].iter_mut().for_each(|p| *p = true);
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionMatrix> {
    check_lengths("confusion matrix", predictions.len(), labels.len())?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// `2tp / (2tp + fp + fn)`, 0 on an empty denominator.
pub fn f1(cm: &ConfusionMatrix) -> f64 {
    let denom = 2 * cm.tp + cm.fp + cm.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * cm.tp) as f64 / denom as f64
    }
}

/// Matthews correlation, 0 when any marginal is empty.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    let v = (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt();
    v.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    F1,
    Mcc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Metric::F1),
            "mcc" => Ok(Metric::Mcc),
            other => Err(Error::Config(format!("unknown metric {other:?}, expected f1 or mcc"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub f1: f64,
    pub mcc: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearchResult {
    pub metric: Metric,
    pub best_threshold: f64,
    pub best_f1: f64,
    pub best_mcc: f64,
    pub best_confusion: ConfusionMatrix,
    /// One row per candidate, thresholds ascending, `+inf` last.
    pub table: Vec<ThresholdRow>,
}

/// Point-adjusted metrics of `score >= threshold`.
pub fn evaluate_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdRow> {
    let raw: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let adjusted = point_adjust(&raw, labels)?;
    let cm = confusion(&adjusted, labels)?;
    Ok(ThresholdRow {
        threshold,
        f1: f1(&cm),
        mcc: mcc(&cm),
        confusion: cm,
    })
}

/// Exhaustive search over every distinct score plus `+inf`.
///
/// `labels` must be aligned with the scores. Ties go to the larger threshold.
pub fn best_threshold_search(
    scores: &ScoreSeries,
    labels: &[bool],
    metric: Metric,
) -> Result<ThresholdSearchResult> {
    if scores.is_empty() {
        return Err(Error::Precondition("cannot search thresholds over an empty score series".into()));
    }
    check_lengths("threshold search", scores.len(), labels.len())?;
    if let Some(bad) = scores.scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("score {bad} is not finite")));
    }
    let mut candidates = scores.scores.clone();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);

    let table = candidates
        .par_iter()
        .map(|&th| evaluate_threshold(&scores.scores, labels, th))
        .collect::<Result<Vec<_>>>()?;

    let key = |row: &ThresholdRow| match metric {
        Metric::F1 => row.f1,
        Metric::Mcc => row.mcc,
    };
    // Thresholds ascend, so keeping the last maximum prefers the larger one.
    let mut best = &table[0];
    for row in &table[1..] {
        if key(row) >= key(best) {
            best = row;
        }
    }
    Ok(ThresholdSearchResult {
        metric,
        best_threshold: best.threshold,
        best_f1: best.f1,
        best_mcc: best.mcc,
        best_confusion: best.confusion,
        table,
    })
}
