use nalgebra::{DMatrix, DVector};

use super::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{spd_cholesky, symmetrize};

/// One exact linear-Gaussian predict/update.
///
/// Returns the posterior over the state and the predicted observation
/// distribution `(C mu_pred, C P_pred C^T + R)`.
pub fn kf_step(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x_t: &DVector<f64>,
) -> Result<(GaussianBelief, GaussianBelief)> {
    let n = belief.dim();
    let m = c.nrows();
    if a.shape() != (n, n) || c.ncols() != n || q.shape() != (n, n) || r.shape() != (m, m) || x_t.len() != m {
        return Err(Error::Shape(format!(
            "kalman step with state {n}, A {:?}, C {:?}, Q {:?}, R {:?}, x {}",
            a.shape(),
            c.shape(),
            q.shape(),
            r.shape(),
            x_t.len()
        )));
    }

    let mu_pred = a * &belief.mean;
    let mut p_pred = a * &belief.covariance * a.transpose() + q;
    symmetrize(&mut p_pred);

    let obs_mean = c * &mu_pred;
    let pct = &p_pred * c.transpose();
    let mut s = c * &pct + r;
    symmetrize(&mut s);

    let chol = spd_cholesky(&s, "innovation covariance")?;
    // K = P C^T S^-1, computed as (S^-1 C P)^T
    let gain = chol.solve(&pct.transpose()).transpose();

    let innovation = x_t - &obs_mean;
    let mean = &mu_pred + &gain * innovation;
    let mut cov = &p_pred - &gain * &pct.transpose();
    symmetrize(&mut cov);

    Ok((
        GaussianBelief { mean, covariance: cov },
        GaussianBelief {
            mean: obs_mean,
            covariance: s,
        },
    ))
}
