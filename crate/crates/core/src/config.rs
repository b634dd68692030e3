//! Run configuration: flat `key = value` files merged with command-line
//! overrides (flag > file > default).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::anomaly::Metric;
use crate::error::{Error, Result};
use crate::filters::{FilterKind, FilterParams, PfSettings, ScoreSource};
use crate::neural::{Hyperparameters, LossWeights};
use crate::timeseries::{AnomalySegment, SynthConfig};

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_assignments(text: &str, source: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{source}:{}", i + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}: expected `key = value`, found {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("{origin}: missing key")));
        }
        out.push(Assignment {
            key: key.to_string(),
            value: value.trim().to_string(),
            origin,
        });
    }
    Ok(out)
}

pub fn read_assignments(path: &Path) -> Result<Vec<Assignment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_assignments(&text, &path.display().to_string())
}

fn parse_value<T: std::str::FromStr>(a: &Assignment, what: &str) -> Result<T> {
    a.value.parse().map_err(|_| {
        Error::Config(format!(
            "{}: {} expects {what}, got {:?}",
            a.origin, a.key, a.value
        ))
    })
}

fn parse_bool(a: &Assignment) -> Result<bool> {
    match a.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{}: {} expects true or false, got {:?}",
            a.origin, a.key, a.value
        ))),
    }
}

fn with_origin<T>(a: &Assignment, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", a.origin)),
        other => other,
    })
}

/// Every setting of the train / detect / eval pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tau: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub filter: FilterKind,
    pub n_sigma: usize,
    pub n_particles: usize,
    pub alpha_init: f64,
    pub alpha_small: f64,
    pub sigma_rbf: f64,
    pub nt_fraction: f64,
    pub nrs_percent: f64,
    pub seed: u64,
    pub score_source: ScoreSource,
    pub metric: Metric,
    pub rejuvenate_every_step: bool,
    pub validation_fraction: f64,
    pub enkf_process_noise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 12,
            latent_dim: 3,
            hidden_dim: 64,
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            alpha1: 0.45,
            alpha2: 0.45,
            alpha3: 0.45,
            filter: FilterKind::Enkf,
            n_sigma: 20,
            n_particles: 1000,
            alpha_init: 100.0,
            alpha_small: 1e-2,
            sigma_rbf: 1.0,
            nt_fraction: 0.1,
            nrs_percent: 1.0,
            seed: 0,
            score_source: ScoreSource::Predicted,
            metric: Metric::F1,
            rejuvenate_every_step: false,
            validation_fraction: 0.25,
            enkf_process_noise: false,
        }
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "tau",
        "latent_dim",
        "hidden_dim",
        "epochs",
        "lr",
        "batch_size",
        "alpha1",
        "alpha2",
        "alpha3",
        "filter",
        "n_sigma",
        "n_particles",
        "alpha_init",
        "alpha_small",
        "sigma_rbf",
        "nt_fraction",
        "nrs_percent",
        "seed",
        "score_source",
        "metric",
        "rejuvenate_every_step",
        "validation_fraction",
        "enkf_process_noise",
    ];

    /// Defaults, then the file, then the overrides; validated.
    pub fn load(file: Option<&Path>, overrides: &[Assignment]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            for a in read_assignments(path)? {
                cfg.apply(&a)?;
            }
        }
        for a in overrides {
            cfg.apply(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, a: &Assignment) -> Result<()> {
        const UINT: &str = "a non-negative integer";
        const REAL: &str = "a number";
        match a.key.as_str() {
            "tau" => self.tau = parse_value(a, UINT)?,
            "latent_dim" => self.latent_dim = parse_value(a, UINT)?,
            "hidden_dim" => self.hidden_dim = parse_value(a, UINT)?,
            "epochs" => self.epochs = parse_value(a, UINT)?,
            "lr" => self.lr = parse_value(a, REAL)?,
            "batch_size" => self.batch_size = parse_value(a, UINT)?,
            "alpha1" => self.alpha1 = parse_value(a, REAL)?,
            "alpha2" => self.alpha2 = parse_value(a, REAL)?,
            "alpha3" => self.alpha3 = parse_value(a, REAL)?,
            "filter" => self.filter = with_origin(a, a.value.parse())?,
            "n_sigma" => self.n_sigma = parse_value(a, UINT)?,
            "n_particles" => self.n_particles = parse_value(a, UINT)?,
            "alpha_init" => self.alpha_init = parse_value(a, REAL)?,
            "alpha_small" => self.alpha_small = parse_value(a, REAL)?,
            "sigma_rbf" => self.sigma_rbf = parse_value(a, REAL)?,
            "nt_fraction" => self.nt_fraction = parse_value(a, REAL)?,
            "nrs_percent" => self.nrs_percent = parse_value(a, REAL)?,
            "seed" => self.seed = parse_value(a, UINT)?,
            "score_source" => self.score_source = with_origin(a, a.value.parse())?,
            "metric" => self.metric = with_origin(a, a.value.parse())?,
            "rejuvenate_every_step" => self.rejuvenate_every_step = parse_bool(a)?,
            "validation_fraction" => self.validation_fraction = parse_value(a, REAL)?,
            "enkf_process_noise" => self.enkf_process_noise = parse_bool(a)?,
            other => return Err(Error::Config(format!("{}: unknown key {other:?}", a.origin))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("tau", self.tau)?;
        positive("latent_dim", self.latent_dim)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("batch_size", self.batch_size)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be non-negative")));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} not in (0, 1)",
                self.validation_fraction
            )));
        }
        // Both filters are validated so a sweep cannot fail late on a bad size.
        let mut params = self.filter_params();
        params.kind = FilterKind::Enkf;
        params.validate()?;
        params.kind = FilterKind::Pf;
        params.validate()
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            window: self.tau,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            loss_weights: LossWeights {
                reconstruction: self.alpha1,
                prediction: self.alpha2,
                smoothness: self.alpha3,
            },
        }
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            kind: self.filter,
            n_sigma: self.n_sigma,
            n_particles: self.n_particles,
            alpha_init: self.alpha_init,
            pf: PfSettings {
                sigma_rbf: self.sigma_rbf,
                nt_fraction: self.nt_fraction,
                nrs_percent: self.nrs_percent,
                alpha_small: self.alpha_small,
                rejuvenate_every_step: self.rejuvenate_every_step,
            },
            score_source: self.score_source,
            enkf_process_noise: self.enkf_process_noise,
        }
    }

    /// Effective value of every key, for reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let values = [
            self.tau.to_string(),
            self.latent_dim.to_string(),
            self.hidden_dim.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.alpha1.to_string(),
            self.alpha2.to_string(),
            self.alpha3.to_string(),
            self.filter.to_string(),
            self.n_sigma.to_string(),
            self.n_particles.to_string(),
            self.alpha_init.to_string(),
            self.alpha_small.to_string(),
            self.sigma_rbf.to_string(),
            self.nt_fraction.to_string(),
            self.nrs_percent.to_string(),
            self.seed.to_string(),
            self.score_source.to_string(),
            self.metric.to_string(),
            self.rejuvenate_every_step.to_string(),
            self.validation_fraction.to_string(),
            self.enkf_process_noise.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }
}

/// Keys of a synthetic-data config. `segment = start length kind` may repeat;
/// when present, the listed segments replace the default ones.
pub const SYNTH_KEYS: &[&str] = &["latent_dim", "num_sensors", "length", "noise_scale", "seed", "segment"];

pub fn load_synth_config(file: Option<&Path>, overrides: &[Assignment]) -> Result<SynthConfig> {
    let mut assignments = match file {
        Some(path) => read_assignments(path)?,
        None => Vec::new(),
    };
    assignments.extend(overrides.iter().cloned());

    let mut cfg = SynthConfig::default();
    let mut segments: Option<Vec<AnomalySegment>> = None;
    for a in &assignments {
        match a.key.as_str() {
            "latent_dim" => cfg.latent_dim = parse_value(a, "a positive integer")?,
            "num_sensors" => cfg.num_sensors = parse_value(a, "a positive integer")?,
            "length" => cfg.length = parse_value(a, "a positive integer")?,
            "noise_scale" => cfg.noise_scale = parse_value(a, "a number")?,
            "seed" => cfg.seed = parse_value(a, "a non-negative integer")?,
            "segment" => {
                let parts: Vec<&str> = a.value.split_whitespace().collect();
                let [start, length, kind] = parts[..] else {
                    return Err(Error::Config(format!(
                        "{}: segment expects `start length kind`, got {:?}",
                        a.origin, a.value
                    )));
                };
                let seg = AnomalySegment {
                    start: parse_value(&Assignment { value: start.into(), ..a.clone() }, "a start index")?,
                    length: parse_value(&Assignment { value: length.into(), ..a.clone() }, "a length")?,
                    kind: with_origin(a, kind.parse())?,
                };
                segments.get_or_insert_with(Vec::new).push(seg);
            }
            other => return Err(Error::Config(format!("{}: unknown key {other:?}", a.origin))),
        }
    }
    if let Some(s) = segments {
        cfg.anomaly_segments = s;
    }
    cfg.validate().map_err(|e| match e {
        Error::Precondition(msg) => Error::Config(msg),
        other => other,
    })?;
    Ok(cfg)
}
