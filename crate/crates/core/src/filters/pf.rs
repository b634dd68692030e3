use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::run::ScoreSource;
use super::{check_step_shapes, GaussianBelief, StepOutput, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::{standard_normal, weighted_moments, with_jitter, GaussianSampler};

/// Tolerance on `sum w = 1` for operations that require normalized weights.
const NORMALIZED_TOL: f64 = 1e-6;

/// Tuning knobs of the SIR filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfSettings {
    /// Kernel width of the RBF likelihood.
    pub sigma_rbf: f64,
    /// Resample when the effective sample size drops below this fraction of N_s.
    pub nt_fraction: f64,
    /// Percentage of particles replaced by fresh prior draws on rejuvenation.
    pub nrs_percent: f64,
    /// Spread of the prior used for initialization and rejuvenation.
    pub alpha_small: f64,
    /// Rejuvenate at every step instead of only after a resample.
    pub rejuvenate_every_step: bool,
}

impl Default for PfSettings {
    fn default() -> Self {
        Self {
            sigma_rbf: 1.0,
            nt_fraction: 0.1,
            nrs_percent: 1.0,
            alpha_small: 1e-2,
            rejuvenate_every_step: false,
        }
    }
}

impl PfSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_rbf > 0.0 && self.sigma_rbf.is_finite()) {
            return Err(Error::Config(format!("sigma_rbf {} must be positive", self.sigma_rbf)));
        }
        if !(0.0..=1.0).contains(&self.nt_fraction) {
            return Err(Error::Config(format!("nt_fraction {} not in [0, 1]", self.nt_fraction)));
        }
        if !(0.0..=100.0).contains(&self.nrs_percent) {
            return Err(Error::Config(format!("nrs_percent {} not in [0, 100]", self.nrs_percent)));
        }
        if !(self.alpha_small > 0.0 && self.alpha_small.is_finite()) {
            return Err(Error::Config(format!("alpha_small {} must be positive", self.alpha_small)));
        }
        Ok(())
    }
}

/// Weighted hidden-state particles.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub settings: PfSettings,
    z0: DVector<f64>,
    rng: ChaCha8Rng,
}

impl ParticleSet {
    /// Particle set from explicit particles and normalized weights.
    pub fn from_parts(
        particles: Vec<DVector<f64>>,
        weights: Vec<f64>,
        z0: DVector<f64>,
        settings: PfSettings,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        if particles.len() < 2 {
            return Err(Error::Precondition(format!(
                "particle filter needs at least 2 particles, got {}",
                particles.len()
            )));
        }
        if weights.len() != particles.len() || particles.iter().any(|p| p.len() != z0.len()) {
            return Err(Error::Shape("particles, weights and z0 disagree in size".into()));
        }
        check_normalized(&weights)?;
        Ok(Self {
            particles,
            weights,
            settings,
            z0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Center of the rejuvenation prior.
    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.z0
    }

    pub fn with_settings(mut self, settings: PfSettings) -> Result<Self> {
        settings.validate()?;
        self.settings = settings;
        Ok(self)
    }

    fn prior_draw(&mut self) -> DVector<f64> {
        let sd = self.settings.alpha_small.sqrt();
        &self.z0 + standard_normal(&mut self.rng, self.z0.len()) * sd
    }
}

/// `n` particles from `N(z0, alpha_small I)` with uniform weights and
/// otherwise default settings.
pub fn pf_init(z0: &DVector<f64>, alpha_small: f64, n: usize, seed: u64) -> Result<ParticleSet> {
    if n < 2 {
        return Err(Error::Precondition(format!("particle filter needs at least 2 particles, got {n}")));
    }
    let settings = PfSettings {
        alpha_small,
        ..PfSettings::default()
    };
    settings.validate()?;
    let mut set = ParticleSet {
        particles: Vec::with_capacity(n),
        weights: vec![1.0 / n as f64; n],
        settings,
        z0: z0.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    for _ in 0..n {
        let p = set.prior_draw();
        set.particles.push(p);
    }
    Ok(set)
}

/// Gaussian kernel `exp(-|x_t - x_pred|^2 / (2 sigma^2))`.
pub fn rbf_likelihood(x_t: &DVector<f64>, x_pred: &DVector<f64>, sigma: f64) -> f64 {
    let d2 = (x_t - x_pred).norm_squared();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn check_normalized(weights: &[f64]) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w.is_nan() || w < 0.0) || (total - 1.0).abs() > NORMALIZED_TOL {
        return Err(Error::Precondition(format!(
            "weights must be non-negative and sum to 1, sum is {total}"
        )));
    }
    Ok(())
}

/// `1 / sum w_i^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    check_normalized(weights)?;
    let s: f64 = weights.iter().map(|w| w * w).sum();
    Ok(1.0 / s)
}

/// Low-variance resampling with one uniform offset.
///
/// Position `i` sits at `(i + u) / N` on the weight CDF. Counts are taken as
/// differences of `ceil(N * cdf - u)`, so index `k` is copied either
/// `floor(N w_k)` or `ceil(N w_k)` times. Output is non-decreasing.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    check_normalized(weights)?;
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>();
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut below_prev = 0usize;
    for (k, &w) in weights.iter().enumerate() {
        cum += w;
        let edge = n as f64 * cum / total;
        let below = ((edge - u).ceil().max(0.0) as usize).min(n);
        for _ in below_prev..below {
            out.push(k);
        }
        below_prev = below.max(below_prev);
    }
    // Rounding in the running sum can leave the final position unassigned.
    if out.len() < n {
        let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(n - 1);
        out.resize(n, last);
    }
    Ok(out)
}

/// One SIR step: propagate with process noise, score the prior predictive,
/// reweight by the RBF kernel, resample on low ESS and rejuvenate.
pub fn pf_step<S: SystemModel>(
    set: &mut ParticleSet,
    model: &S,
    window: &DMatrix<f64>,
    x_t: &DVector<f64>,
    score_source: ScoreSource,
) -> Result<StepOutput> {
    check_step_shapes(model, window, x_t)?;
    let ctx = model.prepare(window)?;
    let n = set.len();

    let mut hidden: Vec<DVector<f64>> = set.particles.par_iter().map(|z| model.transition(z, &ctx)).collect();
    let q = GaussianSampler::new(model.process_cov());
    for z in &mut hidden {
        *z += q.sample(&mut set.rng);
    }
    let mut projected: Vec<DVector<f64>> = hidden.par_iter().map(|z| model.observe(z)).collect();
    let r = GaussianSampler::new(model.measurement_cov());
    for x in &mut projected {
        *x += r.sample(&mut set.rng);
    }
    if projected.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite particle projection".into()));
    }

    let predicted = moments_belief(&projected, &set.weights);

    let sigma = set.settings.sigma_rbf;
    let mut weights: Vec<f64> = set
        .weights
        .iter()
        .zip(&projected)
        .map(|(w, x)| w * rbf_likelihood(x_t, x, sigma))
        .collect();
    let total: f64 = weights.iter().sum();
    let weights_reset = !(total > 0.0 && total.is_finite());
    if weights_reset {
        weights = vec![1.0 / n as f64; n];
    } else {
        for w in &mut weights {
            *w /= total;
        }
    }

    let observation = match score_source {
        ScoreSource::Predicted => predicted,
        ScoreSource::Updated => moments_belief(&projected, &weights),
    };

    set.particles = hidden;
    set.weights = weights;

    let effective_size = effective_sample_size(&set.weights)?;
    let resampled = effective_size < set.settings.nt_fraction * n as f64;
    if resampled {
        let idx = systematic_resample(&set.weights, &mut set.rng)?;
        set.particles = idx.iter().map(|&i| set.particles[i].clone()).collect();
        set.weights = vec![1.0 / n as f64; n];
    }
    if resampled || set.settings.rejuvenate_every_step {
        rejuvenate(set);
    }

    Ok(StepOutput {
        observation,
        weights_reset,
        effective_size,
    })
}

fn moments_belief(points: &[DVector<f64>], weights: &[f64]) -> GaussianBelief {
    let (mean, cov) = weighted_moments(points, weights);
    GaussianBelief {
        mean,
        covariance: with_jitter(&cov),
    }
}

/// Replace the lowest-weight particles (ties by index) with prior draws.
/// Replaced slots keep their weight.
fn rejuvenate(set: &mut ParticleSet) {
    let n = set.len();
    let count = ((set.settings.nrs_percent / 100.0 * n as f64).ceil() as usize).min(n);
    if count == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.weights[a].total_cmp(&set.weights[b]).then(a.cmp(&b)));
    for &i in &order[..count] {
        set.particles[i] = set.prior_draw();
    }
}
