//! Random-intercept logistic regression: marginal likelihood integrated by
//! Gauss–Hermite quadrature and maximized by BFGS.
//!
//! The parameter vector is `(β, s)` with `σ = |s|`. The marginal likelihood
//! is even in `s`, so the optimization is unconstrained.

use nalgebra::{DMatrix, DVector};

use super::irls::{sigmoid, softplus};
use super::quadrature::GaussHermite;
use crate::error::{Error, Result};

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Quadrature nodes `u_q` for a standard-normal intercept `u` (with
/// `b = s·u`) and their log weights, which include the normal density.
///
/// Nodes are centred on the mode of the cluster's log integrand and scaled
/// by its curvature (adaptive Gauss–Hermite), which keeps the rule accurate
/// for large `s`. At `s = 0` they reduce to the plain rule.
pub(crate) fn adaptive_nodes(eta: &[f64], y: &[f64], s: f64, rule: &GaussHermite) -> (Vec<f64>, Vec<f64>) {
    // h(u) = Σ ℓ_i(η_i + s u) − u²/2 is strictly concave with h'' ≤ −1, so
    // the mode lies between 0 and h'(0)
    let derivs = |u: f64| {
        let (mut d1, mut d2) = (-u, -1.0);
        for (&e, &yi) in eta.iter().zip(y) {
            let p = sigmoid(e + s * u);
            d1 += s * (yi - p);
            d2 -= s * s * p * (1.0 - p);
        }
        (d1, d2)
    };
    let (g0, _) = derivs(0.0);
    let (mut lo, mut hi) = if g0 > 0.0 { (0.0, g0) } else { (g0, 0.0) };
    let mut u = 0.0;
    for _ in 0..100 {
        let (d1, d2) = derivs(u);
        if d1 > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let mut next = u - d1 / d2;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() <= 1e-14 * u.abs().max(1.0) {
            u = next;
            break;
        }
        u = next;
    }
    let tau = (-derivs(u).1).sqrt().recip();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut nodes = Vec::with_capacity(rule.len());
    let mut log_w = Vec::with_capacity(rule.len());
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let uq = u + std::f64::consts::SQRT_2 * tau * x;
        nodes.push(uq);
        log_w.push((std::f64::consts::SQRT_2 * tau * w).ln() + x * x - 0.5 * uq * uq - half_log_2pi);
    }
    (nodes, log_w)
}

/// Log of `∫ Π_i p_i(b)^{y_i} (1 − p_i(b))^{1−y_i} φ(b; 0, s²) db`.
pub(crate) fn cluster_log_marginal(eta: &[f64], y: &[bool], s: f64, rule: &GaussHermite) -> f64 {
    let yf: Vec<f64> = y.iter().map(|&t| f64::from(u8::from(t))).collect();
    let (nodes, log_w) = adaptive_nodes(eta, &yf, s, rule);
    let terms: Vec<f64> = nodes
        .iter()
        .zip(&log_w)
        .map(|(&u, &lw)| {
            lw + eta
                .iter()
                .zip(&yf)
                .map(|(&e, &yi)| {
                    let e = e + s * u;
                    yi * e - softplus(e)
                })
                .sum::<f64>()
        })
        .collect();
    log_sum_exp(&terms)
}

/// Marginal log-likelihood and its gradient in `θ = (β, s)`. The gradient
/// holds the adaptive nodes fixed.
pub(crate) fn marginal(z: &DMatrix<f64>, y: &[f64], clusters: &[Vec<usize>], rule: &GaussHermite, theta: &DVector<f64>) -> (f64, DVector<f64>) {
    let p = z.ncols();
    let beta = theta.rows(0, p);
    let s = theta[p];
    let eta = z * beta;
    let mut total = 0.0;
    let mut grad = DVector::zeros(p + 1);
    let q = rule.len();
    let mut log_terms = vec![0.0; q];
    // per node: Σ_i (y_i − p_iq) z_i and Σ_i (y_i − p_iq)
    let mut node_grad = vec![DVector::<f64>::zeros(p); q];
    let mut node_resid = vec![0.0; q];
    for members in clusters {
        let ce: Vec<f64> = members.iter().map(|&i| eta[i]).collect();
        let cy: Vec<f64> = members.iter().map(|&i| y[i]).collect();
        let (nodes, log_w) = adaptive_nodes(&ce, &cy, s, rule);
        for n in 0..q {
            let mut ll = log_w[n];
            let g = &mut node_grad[n];
            g.fill(0.0);
            let mut resid_sum = 0.0;
            for &i in members {
                let e = eta[i] + s * nodes[n];
                ll += y[i] * e - softplus(e);
                let r = y[i] - sigmoid(e);
                resid_sum += r;
                for c in 0..p {
                    g[c] += r * z[(i, c)];
                }
            }
            log_terms[n] = ll;
            node_resid[n] = resid_sum;
        }
        let lse = log_sum_exp(&log_terms);
        total += lse;
        for n in 0..q {
            let r = (log_terms[n] - lse).exp();
            for c in 0..p {
                grad[c] += r * node_grad[n][c];
            }
            grad[p] += r * node_resid[n] * nodes[n];
        }
    }
    (total, grad)
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Minimizes `f` given value-and-gradient evaluations.
pub(crate) fn bfgs(f: impl Fn(&DVector<f64>) -> (f64, DVector<f64>), x0: DVector<f64>, tolerance: f64, max_iterations: usize) -> Result<BfgsResult> {
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut h = DMatrix::<f64>::identity(n, n) / g.amax().max(1.0);
    for iteration in 0..=max_iterations {
        let gnorm = g.amax();
        if gnorm <= tolerance {
            return Ok(BfgsResult {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations: iteration,
            });
        }
        if iteration == max_iterations || !fx.is_finite() {
            return Err(Error::NotConverged {
                iterations: iteration,
                gradient_norm: gnorm,
            });
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            // lost descent; restart from steepest descent
            h = DMatrix::identity(n, n) / gnorm.max(1.0);
            d = -(&h * &g);
            slope = g.dot(&d);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &d * t;
            let (fn_, gn) = f(&xn);
            let armijo = fn_ <= fx + 1e-4 * t * slope;
            // near the optimum the decrease drowns in rounding; fall back to
            // requiring a smaller gradient
            let flat = fn_ <= fx + 1e-12 * fx.abs() && gn.amax() < gnorm;
            if fn_.is_finite() && (armijo || flat) {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t /= 2.0;
        }
        let Some((xn, fn_, gn)) = accepted else {
            return Err(Error::NotConverged {
                iterations: iteration,
                gradient_norm: gnorm,
            });
        };
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            if iteration == 0 {
                h = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * yv.transpose() * rho;
            let right = &i - &yv * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    unreachable!("loop returns on its last iteration")
}

/// Hessian of `f` by central differences of its gradient, symmetrized.
pub(crate) fn numerical_hessian(f: impl Fn(&DVector<f64>) -> (f64, DVector<f64>), x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for c in 0..n {
        let h = 1e-5 * x[c].abs().max(1.0);
        let mut up = x.clone();
        up[c] += h;
        let mut down = x.clone();
        down[c] -= h;
        let diff = (f(&up).1 - f(&down).1) / (2.0 * h);
        hess.set_column(c, &diff);
    }
    (&hess + hess.transpose()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_minimizes_a_quadratic_and_rosenbrock() {
        let quad = |x: &DVector<f64>| {
            let v = (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
            (v, DVector::from_vec(vec![2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)]))
        };
        let r = bfgs(quad, DVector::zeros(2), 1e-10, 200).unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-9 && (r.x[1] + 1.0).abs() < 1e-9);

        let rosen = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            (v, g)
        };
        let r = bfgs(rosen, DVector::from_vec(vec![-1.2, 1.0]), 1e-8, 1000).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let z = DMatrix::from_row_slice(7, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 0.2, 1.0, 1.4, 1.0, -0.3, 1.0, 0.8, 1.0, -1.6]);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let clusters = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]];
        let rule = GaussHermite::new(21).unwrap();
        let theta = DVector::from_vec(vec![0.1, 0.6, 0.8]);
        let (_, g) = marginal(&z, &y, &clusters, &rule, &theta);
        for c in 0..3 {
            let h = 1e-5;
            let mut up = theta.clone();
            up[c] += h;
            let mut down = theta.clone();
            down[c] -= h;
            let fd = (marginal(&z, &y, &clusters, &rule, &up).0 - marginal(&z, &y, &clusters, &rule, &down).0) / (2.0 * h);
            assert!(((fd - g[c]) / g[c]).abs() < 1e-4, "component {c}: {fd} vs {}", g[c]);
        }
        // even in s
        let mut neg = theta.clone();
        neg[2] = -neg[2];
        let (a, _) = marginal(&z, &y, &clusters, &rule, &theta);
        let (b, _) = marginal(&z, &y, &clusters, &rule, &neg);
        assert!((a - b).abs() < 1e-12);
    }
}
