//! Multivariate time-series data: CSV ingestion, categorical encoding,
//! min-max normalization, contiguous splits and sliding windows.

mod csvio;
mod synth;

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use csvio::{load_csv, load_csv_with, write_csv, CsvOptions};
pub use synth::{synth_generate, AnomalyKind, AnomalySegment, SynthConfig};

/// Maximum number of distinct levels a categorical column may have.
pub const MAX_CATEGORIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    Continuous,
    /// Values are indices into `levels`, which are sorted lexicographically.
    Categorical { levels: Vec<String> },
}

impl FeatureKind {
    pub fn is_continuous(&self) -> bool {
        matches!(self, FeatureKind::Continuous)
    }
}

/// A `T x M` real-valued series with optional per-row binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    labels: Option<Vec<bool>>,
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
}

impl Dataset {
    pub fn new(
        values: DMatrix<f64>,
        labels: Option<Vec<bool>>,
        feature_names: Vec<String>,
        feature_kinds: Vec<FeatureKind>,
    ) -> Result<Self> {
        let (t, m) = values.shape();
        if feature_names.len() != m || feature_kinds.len() != m {
            return Err(Error::Shape(format!(
                "{m} value columns but {} names and {} kinds",
                feature_names.len(),
                feature_kinds.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Shape(format!("{t} rows but {} labels", l.len())));
            }
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Precondition(format!("duplicate feature name \"{name}\"")));
            }
        }
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let row = idx % t.max(1);
            return Err(Error::Precondition(format!("non-finite value in row {}", row + 1)));
        }
        Ok(Self {
            values,
            labels,
            feature_names,
            feature_kinds,
        })
    }

    /// All-continuous dataset with generated names `x0, x1, ...`.
    pub fn from_values(values: DMatrix<f64>, labels: Option<Vec<bool>>) -> Result<Self> {
        let m = values.ncols();
        let names = (0..m).map(|j| format!("x{j}")).collect();
        Self::new(values, labels, names, vec![FeatureKind::Continuous; m])
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Contiguous rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::Shape(format!(
                "row range {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.rows(start, end - start).into_owned(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
        })
    }

    /// The `tau` rows strictly before `t`, as a `tau x M` matrix.
    pub fn window_before(&self, t: usize, tau: usize) -> Result<DMatrix<f64>> {
        if tau == 0 || t < tau || t > self.len() {
            return Err(Error::Shape(format!(
                "window of {tau} rows before t={t} in a series of {}",
                self.len()
            )));
        }
        Ok(self.values.rows(t - tau, tau).into_owned())
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Precondition(format!("column \"{name}\" not found")))
    }
}

/// Replace each named categorical column by one indicator column per level.
///
/// Indicator columns are named `column=level` and keep the categorical kind
/// (levels `0`, `1`) so that normalization leaves them untouched.
pub fn one_hot_encode(dataset: &Dataset, columns: &[&str]) -> Result<Dataset> {
    let mut targets = Vec::with_capacity(columns.len());
    for &c in columns {
        let idx = dataset.column_index(c)?;
        match &dataset.feature_kinds[idx] {
            FeatureKind::Categorical { levels } if levels.len() > MAX_CATEGORIES => {
                return Err(Error::Precondition(format!(
                    "column \"{c}\" has {} categories, limit is {MAX_CATEGORIES}",
                    levels.len()
                )));
            }
            FeatureKind::Categorical { .. } => targets.push(idx),
            FeatureKind::Continuous => {
                return Err(Error::Precondition(format!("column \"{c}\" is not categorical")));
            }
        }
    }

    let t = dataset.len();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let indicator = FeatureKind::Categorical {
        levels: vec!["0".to_string(), "1".to_string()],
    };
    for j in 0..dataset.num_features() {
        let column = dataset.values.column(j);
        match (&dataset.feature_kinds[j], targets.contains(&j)) {
            (FeatureKind::Categorical { levels }, true) => {
                for (k, level) in levels.iter().enumerate() {
                    cols.push(DVector::from_iterator(
                        t,
                        column.iter().map(|&v| if v as usize == k { 1.0 } else { 0.0 }),
                    ));
                    names.push(format!("{}={level}", dataset.feature_names[j]));
                    kinds.push(indicator.clone());
                }
            }
            (kind, _) => {
                cols.push(column.into_owned());
                names.push(dataset.feature_names[j].clone());
                kinds.push(kind.clone());
            }
        }
    }
    let values = if cols.is_empty() {
        DMatrix::zeros(t, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    Dataset::new(values, dataset.labels.clone(), names, kinds)
}

/// Per-feature min/max fitted on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub fitted_on: String,
}

pub fn fit_normalizer(train: &Dataset) -> Result<NormalizationStats> {
    fit_normalizer_named(train, "train")
}

pub fn fit_normalizer_named(train: &Dataset, fitted_on: &str) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::Precondition("cannot fit normalizer on an empty dataset".into()));
    }
    let (min, max) = train
        .values
        .column_iter()
        .map(|c| (c.min(), c.max()))
        .unzip();
    Ok(NormalizationStats {
        min,
        max,
        fitted_on: fitted_on.to_string(),
    })
}

impl NormalizationStats {
    fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.min.len() != dataset.num_features() || self.max.len() != dataset.num_features() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} features, dataset has {}",
                self.min.len(),
                dataset.num_features()
            )));
        }
        Ok(())
    }

    fn map(&self, dataset: &Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<Dataset> {
        self.check(dataset)?;
        let mut out = dataset.clone();
        for (j, kind) in dataset.feature_kinds.iter().enumerate() {
            if !kind.is_continuous() {
                continue;
            }
            let (lo, hi) = (self.min[j], self.max[j]);
            for v in out.values.column_mut(j).iter_mut() {
                *v = f(*v, lo, hi);
            }
        }
        Ok(out)
    }

    /// Inverse of [`apply_normalizer`]; constant features come back as their
    /// fitted value.
    pub fn invert(&self, dataset: &Dataset) -> Result<Dataset> {
        self.map(dataset, |v, lo, hi| if hi > lo { v * (hi - lo) + lo } else { lo })
    }
}

/// `(x - min) / (max - min)` on continuous features, unclipped; constant
/// features map to 0.
pub fn apply_normalizer(dataset: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    stats.map(dataset, |v, lo, hi| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub window: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            validation_fraction: 0.25,
            window: 12,
        }
    }
}

/// Contiguous train/validation split: the first `floor((1 - f) T)` rows train.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let f = spec.validation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!("validation fraction {f} not in (0, 1)")));
    }
    if spec.window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    if let Some(labels) = dataset.labels() {
        if let Some(row) = labels.iter().position(|&l| l) {
            return Err(Error::Precondition(format!(
                "training data must be normal-only, row {} is labelled anomalous",
                row + 1
            )));
        }
    }
    let t = dataset.len();
    let n_train = ((1.0 - f) * t as f64).floor() as usize;
    Ok((dataset.slice_rows(0, n_train)?, dataset.slice_rows(n_train, t)?))
}

/// `past` holds rows `index - tau .. index`, `current` is row `index`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    pub past: DMatrix<f64>,
    pub current: DVector<f64>,
    pub index: usize,
}

/// Iterator over the `T - tau` window views of a dataset.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    dataset: &'a Dataset,
    tau: usize,
    next: usize,
}

impl Iterator for Windows<'_> {
    type Item = WindowView;

    fn next(&mut self) -> Option<WindowView> {
        if self.next >= self.dataset.len() {
            return None;
        }
        let t = self.next;
        self.next += 1;
        Some(WindowView {
            past: self.dataset.values.rows(t - self.tau, self.tau).into_owned(),
            current: self.dataset.row(t),
            index: t,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.dataset.len().saturating_sub(self.next);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Windows<'_> {}

pub fn make_windows(dataset: &Dataset, tau: usize) -> Result<Windows<'_>> {
    if tau == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    if dataset.len() <= tau {
        return Err(Error::Precondition(format!(
            "series of length {} is too short for window {tau}",
            dataset.len()
        )));
    }
    Ok(Windows {
        dataset,
        tau,
        next: tau,
    })
}
