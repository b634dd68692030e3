use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::{enkf_init, enkf_step, pf_init, pf_step, GaussianBelief, PfSettings, SystemModel};
use crate::error::{Error, Result};
use crate::timeseries::{make_windows, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Enkf,
    Pf,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Enkf => "enkf",
            FilterKind::Pf => "pf",
        }
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enkf" => Ok(FilterKind::Enkf),
            "pf" => Ok(FilterKind::Pf),
            other => Err(Error::Config(format!("unknown filter {other:?}, expected enkf or pf"))),
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which observation distribution is handed to the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreSource {
    /// Belief before `x_t` is assimilated.
    #[default]
    Predicted,
    /// Belief after assimilating `x_t`.
    Updated,
}

impl ScoreSource {
    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::Predicted => "predicted",
            ScoreSource::Updated => "updated",
        }
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(ScoreSource::Predicted),
            "updated" => Ok(ScoreSource::Updated),
            other => Err(Error::Config(format!(
                "unknown score source {other:?}, expected predicted or updated"
            ))),
        }
    }
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub kind: FilterKind,
    pub n_sigma: usize,
    pub n_particles: usize,
    /// Initial ensemble spread.
    pub alpha_init: f64,
    pub pf: PfSettings,
    pub score_source: ScoreSource,
    /// Add `q ~ N(0, Q)` to ensemble members during the forecast.
    pub enkf_process_noise: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            kind: FilterKind::Enkf,
            n_sigma: 20,
            n_particles: 1000,
            alpha_init: 100.0,
            pf: PfSettings::default(),
            score_source: ScoreSource::Predicted,
            enkf_process_noise: false,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FilterKind::Enkf if self.n_sigma < 2 => {
                return Err(Error::Config(format!("n_sigma {} must be at least 2", self.n_sigma)))
            }
            FilterKind::Pf if self.n_particles < 2 => {
                return Err(Error::Config(format!(
                    "n_particles {} must be at least 2",
                    self.n_particles
                )))
            }
            _ => {}
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::Config(format!("alpha_init {} must be positive", self.alpha_init)));
        }
        self.pf.validate()
    }

    /// Ensemble or particle count for the selected filter.
    pub fn size(&self) -> usize {
        match self.kind {
            FilterKind::Enkf => self.n_sigma,
            FilterKind::Pf => self.n_particles,
        }
    }
}

/// Observation beliefs for `t = tau .. T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub offset: usize,
    pub beliefs: Vec<GaussianBelief>,
    /// Timesteps at which every particle likelihood underflowed.
    pub reset_steps: Vec<usize>,
}

/// Initialize from the first window and step through every later timestep.
pub fn run_filter<S: SystemModel>(
    model: &S,
    dataset: &Dataset,
    params: &FilterParams,
    seed: u64,
) -> Result<FilterRun> {
    params.validate()?;
    let tau = model.window();
    if dataset.num_features() != model.obs_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features, model observes {}",
            dataset.num_features(),
            model.obs_dim()
        )));
    }
    let windows = make_windows(dataset, tau)?;
    let first = dataset.values().rows(0, tau).into_owned();
    let z0 = model.initial_state(&first)?;

    let mut beliefs = Vec::with_capacity(windows.len());
    let mut reset_steps = Vec::new();
    match params.kind {
        FilterKind::Enkf => {
            let mut ens = enkf_init(&z0, params.alpha_init, params.n_sigma, seed)?;
            for view in windows {
                let out = enkf_step(
                    &mut ens,
                    model,
                    &view.past,
                    &view.current,
                    params.enkf_process_noise,
                    params.score_source,
                )
                .map_err(|e| Error::at_step(view.index, e))?;
                beliefs.push(out.observation);
            }
        }
        FilterKind::Pf => {
            let mut set = pf_init(&z0, params.pf.alpha_small, params.n_particles, seed)?.with_settings(params.pf)?;
            for view in windows {
                let out = pf_step(&mut set, model, &view.past, &view.current, params.score_source)
                    .map_err(|e| Error::at_step(view.index, e))?;
                if out.weights_reset {
                    reset_steps.push(view.index);
                }
                beliefs.push(out.observation);
            }
        }
    }
    Ok(FilterRun {
        offset: tau,
        beliefs,
        reset_steps,
    })
}

/// Columns `t, mean_1..mean_M`, then `cov_i_j` row-major when requested.
pub fn write_beliefs_csv(run: &FilterRun, path: impl AsRef<Path>, with_covariance: bool) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let m = run.beliefs.first().map_or(0, |b| b.dim());
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("mean_{i}")));
    if with_covariance {
        for i in 1..=m {
            header.extend((1..=m).map(|j| format!("cov_{i}_{j}")));
        }
    }
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (k, b) in run.beliefs.iter().enumerate() {
        let mut fields = vec![(run.offset + k).to_string()];
        fields.extend(b.mean.iter().map(|v| v.to_string()));
        if with_covariance {
            for i in 0..m {
                fields.extend((0..m).map(|j| b.covariance[(i, j)].to_string()));
            }
        }
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
