use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::run::ScoreSource;
use super::{check_step_shapes, GaussianBelief, StepOutput, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::{cross_covariance, mean, sample_covariance, spd_cholesky, standard_normal, symmetrize, GaussianSampler};

/// Unweighted hidden-state ensemble.
#[derive(Debug, Clone)]
pub struct SigmaEnsemble {
    pub members: Vec<DVector<f64>>,
    rng: ChaCha8Rng,
}

impl SigmaEnsemble {
    /// Ensemble from explicit members, with its own generator seeded by `seed`.
    pub fn from_members(members: Vec<DVector<f64>>, seed: u64) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Precondition(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let dim = members[0].len();
        if members.iter().any(|m| m.len() != dim) {
            return Err(Error::Shape("ensemble members differ in dimension".into()));
        }
        if members.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Precondition("ensemble members must be finite".into()));
        }
        Ok(Self {
            members,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `n` members drawn from `N(z0, alpha I)`.
pub fn enkf_init(z0: &DVector<f64>, alpha: f64, n: usize, seed: u64) -> Result<SigmaEnsemble> {
    if n < 2 {
        return Err(Error::Precondition(format!("ensemble needs at least 2 members, got {n}")));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Config(format!("initial spread alpha {alpha} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = alpha.sqrt();
    let members = (0..n)
        .map(|_| z0 + standard_normal(&mut rng, z0.len()) * sd)
        .collect();
    Ok(SigmaEnsemble { members, rng })
}

/// Stochastic (perturbed-observation) ensemble Kalman step.
///
/// Members are propagated through `f` without process noise unless
/// `process_noise` is set; the gain is `P_xz P_zz^-1` with both covariances
/// using divisor `N - 1` and `P_zz` including `R`.
pub fn enkf_step<S: SystemModel>(
    ensemble: &mut SigmaEnsemble,
    model: &S,
    window: &DMatrix<f64>,
    x_t: &DVector<f64>,
    process_noise: bool,
    score_source: ScoreSource,
) -> Result<StepOutput> {
    check_step_shapes(model, window, x_t)?;
    let ctx = model.prepare(window)?;
    let r = model.measurement_cov();

    let mut forecast: Vec<DVector<f64>> = ensemble
        .members
        .par_iter()
        .map(|z| model.transition(z, &ctx))
        .collect();
    if process_noise {
        let q = GaussianSampler::new(model.process_cov());
        for z in &mut forecast {
            *z += q.sample(&mut ensemble.rng);
        }
    }
    let projected: Vec<DVector<f64>> = forecast.par_iter().map(|z| model.observe(z)).collect();
    if projected.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite ensemble projection".into()));
    }

    let mu_z = mean(&projected);
    let mut p_zz = sample_covariance(&projected)? + r;
    symmetrize(&mut p_zz);
    let p_xz = cross_covariance(&forecast, &projected)?;
    let chol = spd_cholesky(&p_zz, "ensemble innovation covariance")?;
    let gain = chol.solve(&p_xz.transpose()).transpose();

    let noise = GaussianSampler::new(r);
    for ((member, zf), xh) in ensemble.members.iter_mut().zip(&forecast).zip(&projected) {
        let e = noise.sample(&mut ensemble.rng);
        *member = zf + &gain * (x_t + e - xh);
    }

    let observation = match score_source {
        ScoreSource::Predicted => GaussianBelief {
            mean: mu_z,
            covariance: p_zz,
        },
        ScoreSource::Updated => {
            let post: Vec<DVector<f64>> = ensemble.members.par_iter().map(|z| model.observe(z)).collect();
            let mut cov = sample_covariance(&post)? + r;
            symmetrize(&mut cov);
            GaussianBelief {
                mean: mean(&post),
                covariance: cov,
            }
        }
    };
    Ok(StepOutput {
        observation,
        weights_reset: false,
        effective_size: ensemble.len() as f64,
    })
}
