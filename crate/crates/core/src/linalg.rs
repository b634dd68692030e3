//! Small dense linear-algebra helpers shared by the filters, the noise
//! estimator and the scorer.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Diagonal jitter added before every inversion or factorization.
pub const JITTER: f64 = 1e-9;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetrize, then clamp negative eigenvalues to zero.
pub fn clamp_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    if s.nrows() == 0 {
        return s;
    }
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn with_jitter(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    m + DMatrix::identity(n, n) * JITTER
}

pub fn mean(points: &[DVector<f64>]) -> DVector<f64> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut acc = DVector::zeros(dim);
    for p in points {
        acc += p;
    }
    if !points.is_empty() {
        acc /= points.len() as f64;
    }
    acc
}

/// Mean-subtracted sample covariance with divisor `N - 1`.
pub fn sample_covariance(points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    cross_covariance(points, points)
}

/// Sample cross-covariance `sum (a_i - mean a)(b_i - mean b)^T / (N - 1)`.
pub fn cross_covariance(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cross-covariance over {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Precondition(format!(
            "covariance needs at least 2 samples, got {}",
            a.len()
        )));
    }
    let ma = mean(a);
    let mb = mean(b);
    let mut acc = DMatrix::zeros(ma.len(), mb.len());
    for (x, y) in a.iter().zip(b) {
        let dx = x - &ma;
        let dy = y - &mb;
        acc.ger(1.0, &dx, &dy, 1.0);
    }
    Ok(acc / (a.len() as f64 - 1.0))
}

/// Weighted mean and covariance `sum w_i (x_i - mu)(x_i - mu)^T / sum w_i`.
pub fn weighted_moments(points: &[DVector<f64>], weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = points.first().map_or(0, |p| p.len());
    let total: f64 = weights.iter().sum();
    let mut mu = DVector::zeros(dim);
    for (p, &w) in points.iter().zip(weights) {
        mu.axpy(w / total, p, 1.0);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (p, &w) in points.iter().zip(weights) {
        let d = p - &mu;
        cov.ger(w / total, &d, &d, 1.0);
    }
    symmetrize(&mut cov);
    (mu, cov)
}

/// Factor `L` with `L L^T = m` for a PSD `m`, via Cholesky or, when `m` is
/// singular, a clamped eigendecomposition. No jitter is added, so a zero
/// covariance yields exactly zero draws.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    if let Some(chol) = Cholesky::new(s.clone()) {
        return chol.l();
    }
    let eig = SymmetricEigen::new(s);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Cholesky of `m + jitter I`; fails when the matrix is not positive definite.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    Cholesky::new(with_jitter(m))
        .ok_or_else(|| Error::Numerical(format!("{what} is singular after jitter")))
}

/// Draws from a multivariate normal with a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Self {
        Self {
            factor: psd_factor(cov),
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Zero-mean draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = standard_normal(rng, self.dim());
        &self.factor * eps
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
