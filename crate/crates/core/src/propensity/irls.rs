//! Maximum-likelihood logistic regression by iteratively reweighted least
//! squares on a prepared (standardized) design matrix.

use nalgebra::{DMatrix, DVector};

use super::FitOptions;
use crate::error::{Error, Result};

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ y η − ln(1 + e^η)`
pub(crate) fn log_likelihood(z: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = z * beta;
    eta.iter().zip(y).map(|(&e, &yi)| yi * e - softplus(e)).sum()
}

/// `Zᵀ (y − p)`
pub(crate) fn score(z: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = z * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| yi - sigmoid(e)));
    z.tr_mul(&resid)
}

/// Observed information `Zᵀ diag(p(1−p)) Z`.
pub(crate) fn information(z: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let eta = z * beta;
    let weighted = DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| {
        let p = sigmoid(eta[r]);
        z[(r, c)] * p * (1.0 - p)
    });
    z.tr_mul(&weighted)
}

#[derive(Debug, Clone)]
pub(crate) struct IrlsResult {
    pub beta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
}

/// Largest |η| tolerated at convergence; beyond it fitted probabilities are
/// numerically 0 or 1, which only happens under separation.
const SATURATION: f64 = 30.0;

pub(crate) fn irls(z: &DMatrix<f64>, y: &[f64], opts: &FitOptions) -> Result<IrlsResult> {
    let p = z.ncols();
    let mut beta = DVector::zeros(p);
    let mut ll = log_likelihood(z, y, &beta);
    for iteration in 0..=opts.max_iterations {
        let g = score(z, y, &beta);
        let gnorm = g.amax();
        if gnorm <= opts.tolerance {
            let eta = z * &beta;
            if eta.amax() > SATURATION {
                return Err(Error::Separation(format!(
                    "fitted linear predictor reaches {:.1}; some probabilities are numerically 0 or 1",
                    eta.amax()
                )));
            }
            let covariance = information(z, &beta)
                .try_inverse()
                .ok_or_else(|| Error::Separation("information matrix is singular at the optimum".into()))?;
            return Ok(IrlsResult {
                beta,
                covariance,
                iterations: iteration,
                gradient_norm: gnorm,
                log_likelihood: ll,
            });
        }
        if iteration == opts.max_iterations {
            return Err(Error::NotConverged {
                iterations: iteration,
                gradient_norm: gnorm,
            });
        }
        let step = information(z, &beta)
            .cholesky()
            .ok_or_else(|| Error::Separation("information matrix lost positive definiteness".into()))?
            .solve(&g);
        // Newton step with halving if the likelihood drops
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut next_ll = log_likelihood(z, y, &next);
        while next_ll < ll - 1e-12 * ll.abs() && t > 1e-10 {
            t /= 2.0;
            next = &beta + &step * t;
            next_ll = log_likelihood(z, y, &next);
        }
        beta = next;
        ll = next_ll;
        if beta.norm() > opts.separation_threshold {
            return Err(Error::Separation(format!(
                "coefficient norm {:.3e} exceeds {:.0e}",
                beta.norm(),
                opts.separation_threshold
            )));
        }
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_link_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn score_matches_finite_differences_of_the_likelihood() {
        let z = DMatrix::from_row_slice(6, 2, &[1.0, -1.2, 1.0, 0.3, 1.0, 0.9, 1.0, -0.4, 1.0, 2.0, 1.0, 0.1]);
        let y = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let beta = DVector::from_vec(vec![0.2, -0.7]);
        let g = score(&z, &y, &beta);
        let h = 1e-5;
        for c in 0..2 {
            let mut up = beta.clone();
            up[c] += h;
            let mut down = beta.clone();
            down[c] -= h;
            let fd = (log_likelihood(&z, &y, &up) - log_likelihood(&z, &y, &down)) / (2.0 * h);
            assert!(((fd - g[c]) / g[c]).abs() < 1e-4);
        }
    }
}
