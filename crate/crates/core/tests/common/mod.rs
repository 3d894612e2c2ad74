//! Oracles shared by the integration tests: quadrature posterior means and
//! central differences.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};

/// Trapezoid rule of `f` over `[lo, hi]` with `n` nodes. Exponentially
/// accurate for Gaussian integrands whose mass lies inside the interval.
pub fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for i in 1..n - 1 {
        acc += f(lo + i as f64 * h);
    }
    acc * h
}

pub fn normal_pdf(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// One real coordinate of the active-row integral, divided by the null
/// likelihood to keep the ratio well scaled:
/// `(int N(x; 0, pv) N(r - x; 0, nv) dx / N(r; 0, nv), int x ... / same)`.
fn coordinate(r: f64, prior_var: f64, noise_var: f64) -> (f64, f64) {
    let spread = 14.0 * prior_var.sqrt().max(noise_var.sqrt());
    let (lo, hi) = (r.min(0.0) - spread, r.max(0.0) + spread);
    let null = normal_pdf(r, noise_var);
    let integrand = |x: f64| normal_pdf(x, prior_var) * normal_pdf(r - x, noise_var) / null;
    let z = trapezoid(lo, hi, 40_001, integrand);
    let m = trapezoid(lo, hi, 40_001, |x| x * integrand(x));
    (z, m)
}

/// Posterior mean of a group of rows under "with probability `p_active` one
/// uniformly chosen row carries an i.i.d. Gaussian vector of variance
/// `prior_var` per real coordinate, the rest are zero", observed in Gaussian
/// noise of variance `noise_var` per real coordinate.
///
/// The active-row integral factorizes over coordinates, so each one is a 1-D
/// quadrature.
pub fn group_posterior_mean(r: ArrayView2<'_, f64>, p_active: f64, prior_var: f64, noise_var: f64) -> Array2<f64> {
    let g = r.nrows();
    let mut odds = vec![1.0; g];
    let mut means = Array2::zeros(r.raw_dim());
    for t in 0..g {
        let coords: Vec<(f64, f64)> = r.row(t).iter().map(|&v| coordinate(v, prior_var, noise_var)).collect();
        for (j, (z, m)) in coords.iter().enumerate() {
            odds[t] *= z;
            means[[t, j]] = m / z;
        }
    }
    let prior_t = p_active / g as f64;
    let evidence = (1.0 - p_active) + prior_t * odds.iter().sum::<f64>();
    for t in 0..g {
        let post = prior_t * odds[t] / evidence;
        means.row_mut(t).mapv_inplace(|v| v * post);
    }
    means
}

/// `||a - b|| / ||b||` over all entries.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Central-difference Jacobian of `f: R^n -> R^m`, `m x n`.
pub fn fd_jacobian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Array2<f64> {
    let m = f(x).len();
    let mut jac = Array2::zeros((m, x.len()));
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + h;
        let up = f(&p);
        p[k] = x[k] - h;
        let down = f(&p);
        p[k] = x[k];
        for i in 0..m {
            jac[[i, k]] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Array1<f64> {
    let jac = fd_jacobian(x, h, |p| vec![f(p)]);
    jac.row(0).to_owned()
}

/// Complex-linear part of a real matrix acting on interleaved (re, im) pairs.
pub fn complex_linear_part(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() / 2 {
        for j in 0..m.ncols() / 2 {
            let (a, b) = (m[[2 * i, 2 * j]], m[[2 * i, 2 * j + 1]]);
            let (c, d) = (m[[2 * i + 1, 2 * j]], m[[2 * i + 1, 2 * j + 1]]);
            let (re, im) = (0.5 * (a + d), 0.5 * (c - b));
            out[[2 * i, 2 * j]] = re;
            out[[2 * i + 1, 2 * j + 1]] = re;
            out[[2 * i, 2 * j + 1]] = -im;
            out[[2 * i + 1, 2 * j]] = im;
        }
    }
    out
}
