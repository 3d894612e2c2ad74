//! Group-aware orthogonal matching pursuit and a matched-filter reference.
//!
//! A selected column removes its whole user group from further selection, so
//! the recovered support has at most one delay per user.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for the least-squares solve.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    /// Selected columns of the dictionary in selection order.
    pub selected: Vec<usize>,
    /// Least-squares coefficients, one row per selected column.
    pub coefficients: Array2<f64>,
    /// Full-size estimate with the coefficients placed at their columns.
    pub estimate: Array2<f64>,
    /// Row norm of each user's coefficient, zero for unselected users.
    pub scores: Vec<f64>,
    /// Residual Frobenius norm before the first and after every selection.
    pub residual_norms: Vec<f64>,
    /// Set when some least-squares system was rank deficient and the
    /// minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// Default selection cap `2 p_a N`, at least 1.
pub fn default_cap(p_active: f64, users: usize) -> usize {
    ((2.0 * p_active * users as f64).round() as usize).max(1)
}

fn frobenius(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Minimum-norm least squares `argmin ||y - a c||_F` through the SVD of `a`.
fn least_squares(a: &Array2<f64>, y: ArrayView2<'_, f64>) -> (Array2<f64>, bool) {
    let (m, k) = a.dim();
    let am = DMatrix::from_fn(m, k, |i, j| a[[i, j]]);
    let ym = DMatrix::from_fn(m, y.ncols(), |i, j| y[[i, j]]);
    let svd = am.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = RANK_TOL * smax.max(f64::MIN_POSITIVE);
    let deficient = k > m || svd.singular_values.iter().any(|&s| s <= eps);
    let c = svd.solve(&ym, eps).expect("both factors were computed");
    (Array2::from_shape_fn((k, y.ncols()), |(i, j)| c[(i, j)]), deficient)
}

/// Runs up to `cap` selections on `y` (`L x width`) with dictionary `s`
/// (`L x N~`) whose columns come in groups of `group_len`.
pub fn omp(y: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, group_len: usize, cap: usize) -> Result<OmpResult> {
    if cap == 0 {
        return Err(Error::InvalidArgument("selection cap must be at least 1".into()));
    }
    if y.nrows() != s.nrows() {
        return Err(Error::Shape(format!("signal has {} rows, dictionary {}", y.nrows(), s.nrows())));
    }
    if group_len == 0 || s.ncols() % group_len != 0 {
        return Err(Error::Shape("dictionary columns do not split into user groups".into()));
    }
    let users = s.ncols() / group_len;
    let width = y.ncols();
    let mut excluded = vec![false; users];
    let mut selected = Vec::new();
    let mut residual = y.to_owned();
    let mut coefficients = Array2::<f64>::zeros((0, width));
    let mut residual_norms = vec![frobenius(&residual)];
    let mut rank_deficient = false;
    while selected.len() < cap.min(users) {
        let corr = s.t().dot(&residual);
        let mut best: Option<(usize, f64)> = None;
        for (col, row) in corr.axis_iter(Axis(0)).enumerate() {
            if excluded[col / group_len] {
                continue;
            }
            let c = row.iter().map(|v| v * v).sum::<f64>();
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((col, c));
            }
        }
        let Some((col, _)) = best else { break };
        excluded[col / group_len] = true;
        selected.push(col);
        let sub = s.select(Axis(1), &selected);
        let (c, deficient) = least_squares(&sub, y);
        rank_deficient |= deficient;
        residual = &y - &sub.dot(&c);
        coefficients = c;
        residual_norms.push(frobenius(&residual));
    }
    let mut estimate = Array2::<f64>::zeros((s.ncols(), width));
    let mut scores = vec![0.0; users];
    for (k, &col) in selected.iter().enumerate() {
        estimate.row_mut(col).assign(&coefficients.row(k));
        scores[col / group_len] = coefficients.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(OmpResult {
        selected,
        coefficients,
        estimate,
        scores,
        residual_norms,
        rank_deficient,
    })
}

/// Matched-filter estimate `s^T y`.
pub fn matched_filter(y: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if y.nrows() != s.nrows() {
        return Err(Error::Shape(format!("signal has {} rows, dictionary {}", y.nrows(), s.nrows())));
    }
    Ok(s.t().dot(&y))
}
