//! Bayesian state estimation over a state-space model
//!
//! ```text
//! z[t] = f(z[t-1], window[t]) + q[t],   q ~ N(0, Q)
//! x[t] = h_inv(z[t]) + r[t],            r ~ N(0, R)
//! ```
//!
//! Both Monte Carlo filters keep their members in the hidden space and
//! report a Gaussian over the next observation, which is what the anomaly
//! scorer compares against.

mod enkf;
mod kalman;
mod pf;
mod run;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::neural::{NeuralModel, NoiseEstimate};

pub use enkf::{enkf_init, enkf_step, SigmaEnsemble};
pub use kalman::kf_step;
pub use pf::{
    effective_sample_size, pf_init, pf_step, rbf_likelihood, systematic_resample, ParticleSet,
    PfSettings,
};
pub use run::{run_filter, write_beliefs_csv, FilterKind, FilterParams, FilterRun, ScoreSource};

/// Mean and covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "mean of length {n} with a {:?} covariance",
                covariance.shape()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// What a filter produces for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Observation-space Gaussian used for scoring: the predicted
    /// distribution, or the post-update one under [`ScoreSource::Updated`].
    pub observation: GaussianBelief,
    /// Set when every particle likelihood underflowed and the weights were
    /// reset to uniform.
    pub weights_reset: bool,
    /// Effective sample size after assimilating `x_t` and before any
    /// resampling; the member count for the ensemble filter.
    pub effective_size: f64,
}

/// The state-space contract the filters run on.
///
/// `prepare` lets a model do per-timestep work that does not depend on the
/// hidden state once, instead of once per ensemble member.
pub trait SystemModel: Sync {
    type Context: Sync;

    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Number of past observations the transition reads.
    fn window(&self) -> usize;
    fn process_cov(&self) -> &DMatrix<f64>;
    fn measurement_cov(&self) -> &DMatrix<f64>;
    /// Initial hidden state given the first full window.
    fn initial_state(&self, window: &DMatrix<f64>) -> Result<DVector<f64>>;
    fn prepare(&self, window: &DMatrix<f64>) -> Result<Self::Context>;
    fn transition(&self, z: &DVector<f64>, context: &Self::Context) -> DVector<f64>;
    fn observe(&self, z: &DVector<f64>) -> DVector<f64>;
}

/// `f(z) = A z`, `h_inv(z) = C z`; the window is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub z0: DVector<f64>,
    pub window: usize,
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        z0: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = c.nrows();
        if a.ncols() != n || c.ncols() != n || q.shape() != (n, n) || r.shape() != (m, m) || z0.len() != n {
            return Err(Error::Shape(format!(
                "linear model with A {:?}, C {:?}, Q {:?}, R {:?}, z0 {}",
                a.shape(),
                c.shape(),
                q.shape(),
                r.shape(),
                z0.len()
            )));
        }
        Ok(Self {
            a,
            c,
            q,
            r,
            z0,
            window: 1,
        })
    }
}

impl SystemModel for LinearModel {
    type Context = ();

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    fn window(&self) -> usize {
        self.window
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn measurement_cov(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn initial_state(&self, _window: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.z0.clone())
    }

    fn prepare(&self, _window: &DMatrix<f64>) -> Result<()> {
        Ok(())
    }

    fn transition(&self, z: &DVector<f64>, _: &()) -> DVector<f64> {
        &self.a * z
    }

    fn observe(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.c * z
    }
}

/// Adapter running the filters on a trained [`NeuralModel`].
#[derive(Debug, Clone, Copy)]
pub struct NeuralSystem<'a> {
    pub model: &'a NeuralModel,
    pub noise: &'a NoiseEstimate,
}

impl<'a> NeuralSystem<'a> {
    pub fn new(model: &'a NeuralModel, noise: &'a NoiseEstimate) -> Result<Self> {
        let (m, k) = (model.dims.sensors, model.dims.latent);
        if noise.q.shape() != (k, k) || noise.r.shape() != (m, m) {
            return Err(Error::Shape(format!(
                "noise covariances {:?}, {:?} do not fit a model with M={m}, M'={k}",
                noise.q.shape(),
                noise.r.shape()
            )));
        }
        Ok(Self { model, noise })
    }
}

impl SystemModel for NeuralSystem<'_> {
    /// Final LSTM hidden state for the window.
    type Context = DVector<f64>;

    fn state_dim(&self) -> usize {
        self.model.dims.latent
    }

    fn obs_dim(&self) -> usize {
        self.model.dims.sensors
    }

    fn window(&self) -> usize {
        self.model.dims.window
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.noise.q
    }

    fn measurement_cov(&self) -> &DMatrix<f64> {
        &self.noise.r
    }

    fn initial_state(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.model.encode(window)
    }

    fn prepare(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.model.window_context(window)
    }

    fn transition(&self, z: &DVector<f64>, context: &DVector<f64>) -> DVector<f64> {
        self.model.transition_with_context(z, context)
    }

    fn observe(&self, z: &DVector<f64>) -> DVector<f64> {
        self.model.decode(z).expect("latent size checked by the filter")
    }
}

fn check_step_shapes<S: SystemModel>(model: &S, window: &DMatrix<f64>, x_t: &DVector<f64>) -> Result<()> {
    if x_t.len() != model.obs_dim() {
        return Err(Error::Shape(format!(
            "observation has {} entries, model observes {}",
            x_t.len(),
            model.obs_dim()
        )));
    }
    if window.nrows() != model.window() {
        return Err(Error::Shape(format!(
            "window has {} rows, model reads {}",
            window.nrows(),
            model.window()
        )));
    }
    Ok(())
}
