//! Shrinkage (denoising) functions and their derivatives.
//!
//! All four denoisers act on a matrix of rows, one row per (user, delay)
//! hypothesis, where a row holds the `antennas * components` real numbers of
//! that hypothesis. Rows come in groups of `T_g + 1`, one group per user.
//!
//! * soft thresholding shrinks each row towards zero by `theta sqrt(M) sigma`
//!   along its own direction (the scalar variant is the `M = 1` case);
//! * the MMSE denoiser is the posterior mean under the group prior "user
//!   inactive, or active at exactly one delay with Gaussian channel",
//!   generalized by four learnable parameters:
//!
//! ```text
//! eta_t = theta3 * kappa * w_t * r_t - theta4 * r_t
//! w_t   = exp(a |r_t|^2) / (sum_s exp(a |r_s|^2) + K theta2)
//! kappa = theta1 / (theta1 + sigma^2)
//! a     = c theta1 / (sigma^2 (theta1 + sigma^2))
//! K     = (1 + theta1 / sigma^2)^(c M)
//! ```
//!
//! with `c = 1` for complex and `c = 1/2` for real channels. The weights
//! `w_t` are the reciprocals of the usual `q` helper and are evaluated in the
//! log domain, so large `|r|` or large `M` never overflow.
//!
//! Derivatives are real Jacobians of the real layout. The Onsager matrix used
//! by AMP is their sum over rows; in the complex field each 2x2 block is
//! replaced by its complex-linear part, which is the Wirtinger derivative
//! holding the conjugate fixed.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_model::{Field, SystemConfig};

/// Default soft-threshold multiplier.
pub const DEFAULT_ST_THETA: f64 = 1.14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    SoftThreshold,
    Mmse,
}

/// The four denoiser families, distinguished by kind and antenna count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkageKind {
    ScalarSt,
    GroupMmse,
    VectorSt,
    VectorMmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShrinkageParams {
    SoftThreshold {
        theta: f64,
    },
    Mmse {
        /// Prior channel variance surrogate.
        theta1: f64,
        /// Inactivity odds surrogate.
        theta2: f64,
        /// Gain on the nonlinear part.
        theta3: f64,
        /// Linear leakage.
        theta4: f64,
    },
}

impl ShrinkageParams {
    pub fn soft_threshold(theta: f64) -> Self {
        ShrinkageParams::SoftThreshold { theta }
    }

    /// Posterior-mean parameters for attenuation `phi` and activity `p_active`
    /// spread uniformly over `group_len` delays.
    pub fn mmse_for(phi: f64, p_active: f64, group_len: usize) -> Self {
        let p_delay = p_active / group_len as f64;
        ShrinkageParams::Mmse {
            theta1: phi,
            theta2: (1.0 - p_active) / p_delay,
            theta3: 1.0,
            theta4: 0.0,
        }
    }

    pub fn default_for(kind: DenoiserKind, config: &SystemConfig) -> Self {
        match kind {
            DenoiserKind::SoftThreshold => Self::soft_threshold(DEFAULT_ST_THETA),
            DenoiserKind::Mmse => Self::mmse_for(config.phi, config.p_active, config.group_len()),
        }
    }

    pub fn kind(&self) -> DenoiserKind {
        match self {
            ShrinkageParams::SoftThreshold { .. } => DenoiserKind::SoftThreshold,
            ShrinkageParams::Mmse { .. } => DenoiserKind::Mmse,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ShrinkageParams::SoftThreshold { .. } => 1,
            ShrinkageParams::Mmse { .. } => 4,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            ShrinkageParams::SoftThreshold { theta } => vec![theta],
            ShrinkageParams::Mmse {
                theta1,
                theta2,
                theta3,
                theta4,
            } => vec![theta1, theta2, theta3, theta4],
        }
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        match self {
            ShrinkageParams::SoftThreshold { theta } => *theta = v[0],
            ShrinkageParams::Mmse {
                theta1,
                theta2,
                theta3,
                theta4,
            } => {
                *theta1 = v[0];
                *theta2 = v[1];
                *theta3 = v[2];
                *theta4 = v[3];
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ShrinkageParams::SoftThreshold { theta } => theta > 0.0 && theta.is_finite(),
            ShrinkageParams::Mmse {
                theta1,
                theta2,
                theta3,
                theta4,
            } => {
                theta1 > 0.0
                    && theta1.is_finite()
                    && theta2 >= 0.0
                    && theta3.is_finite()
                    && theta4.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{self:?}")))
        }
    }

    /// Pulls parameters back into the admissible set after a gradient step.
    pub fn project(&mut self) {
        const FLOOR: f64 = 1e-8;
        match self {
            ShrinkageParams::SoftThreshold { theta } => *theta = theta.max(FLOOR),
            ShrinkageParams::Mmse { theta1, theta2, .. } => {
                *theta1 = theta1.max(FLOOR);
                *theta2 = theta2.max(0.0);
            }
        }
    }
}

/// Row geometry of a denoiser input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLayout {
    pub field: Field,
    /// Antennas handled jointly by the denoiser.
    pub antennas: usize,
    /// Rows per user group, `T_g + 1`.
    pub group_len: usize,
}

impl RowLayout {
    pub fn new(field: Field, antennas: usize, group_len: usize) -> Self {
        RowLayout {
            field,
            antennas,
            group_len,
        }
    }

    /// Real numbers per row.
    pub fn width(&self) -> usize {
        self.antennas * self.field.components()
    }

    pub fn kind(&self, denoiser: DenoiserKind) -> ShrinkageKind {
        match (denoiser, self.antennas) {
            (DenoiserKind::SoftThreshold, 1) => ShrinkageKind::ScalarSt,
            (DenoiserKind::SoftThreshold, _) => ShrinkageKind::VectorSt,
            (DenoiserKind::Mmse, 1) => ShrinkageKind::GroupMmse,
            (DenoiserKind::Mmse, _) => ShrinkageKind::VectorMmse,
        }
    }

    fn check(&self, r: &ArrayView2<'_, f64>) -> Result<()> {
        if r.ncols() != self.width() {
            return Err(Error::Shape(format!(
                "denoiser input has {} columns, layout needs {}",
                r.ncols(),
                self.width()
            )));
        }
        if self.group_len == 0 || r.nrows() % self.group_len != 0 {
            return Err(Error::Shape(format!(
                "{} rows do not split into groups of {}",
                r.nrows(),
                self.group_len
            )));
        }
        Ok(())
    }
}

/// Denoiser output and the (projected) sum of its row Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageEval {
    pub output: Array2<f64>,
    /// `width x width` Onsager matrix in the real layout.
    pub onsager: Array2<f64>,
}

impl ShrinkageEval {
    /// The scalar divergence `b` of a single-antenna denoiser.
    pub fn scalar_divergence(&self) -> f64 {
        self.onsager[[0, 0]]
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveSigma(sigma))
    }
}

/// Per-group quantities of the MMSE denoiser.
struct MmseGroup {
    /// Normalized weights `w_t = 1 / q_t`.
    w: Vec<f64>,
    /// Squared row norms.
    norm2: Vec<f64>,
    /// `K theta2 / S`.
    u: f64,
    /// `K / S`.
    k_over_s: f64,
}

struct MmseConsts {
    theta1: f64,
    theta2: f64,
    theta3: f64,
    theta4: f64,
    kappa: f64,
    a: f64,
    log_k: f64,
    c_m: f64,
    sigma2: f64,
}

impl MmseConsts {
    fn new(params: &ShrinkageParams, layout: &RowLayout, sigma: f64) -> Self {
        let ShrinkageParams::Mmse {
            theta1,
            theta2,
            theta3,
            theta4,
        } = *params
        else {
            unreachable!("caller dispatches on kind")
        };
        let sigma2 = sigma * sigma;
        let c = layout.field.exponent_scale();
        let c_m = c * layout.antennas as f64;
        MmseConsts {
            theta1,
            theta2,
            theta3,
            theta4,
            kappa: theta1 / (theta1 + sigma2),
            a: c * theta1 / (sigma2 * (theta1 + sigma2)),
            log_k: c_m * (theta1 / sigma2).ln_1p(),
            c_m,
            sigma2,
        }
    }

    fn group(&self, r: &ArrayView2<'_, f64>) -> MmseGroup {
        let rc = r.as_standard_layout();
        self.group_flat(rc.as_slice().expect("standard layout"), r.ncols())
    }

    /// Same as `group` on a row-major group of rows of length `width`.
    fn group_flat(&self, rg: &[f64], width: usize) -> MmseGroup {
        let norm2: Vec<f64> = rg.chunks_exact(width).map(dot_self).collect();
        if self.theta2 == f64::INFINITY {
            // Inactivity is certain.
            return MmseGroup {
                w: vec![0.0; norm2.len()],
                norm2,
                u: 1.0,
                k_over_s: 0.0,
            };
        }
        let log_prior = if self.theta2 > 0.0 {
            self.log_k + self.theta2.ln()
        } else {
            f64::NEG_INFINITY
        };
        let m = norm2.iter().map(|n| self.a * n).fold(log_prior, f64::max);
        let total: f64 =
            norm2.iter().map(|n| (self.a * n - m).exp()).sum::<f64>() + (log_prior - m).exp();
        let log_s = m + total.ln();
        MmseGroup {
            w: norm2.iter().map(|n| (self.a * n - log_s).exp()).collect(),
            norm2,
            u: (log_prior - log_s).exp(),
            k_over_s: (self.log_k - log_s).exp(),
        }
    }
}

fn dot_self(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `acc += scale * x x^T` on a row-major `n x n` buffer.
fn add_outer_flat(acc: &mut [f64], scale: f64, x: &[f64]) {
    let n = x.len();
    for (i, &xi) in x.iter().enumerate() {
        let sx = scale * xi;
        for (a, &xj) in acc[i * n..(i + 1) * n].iter_mut().zip(x) {
            *a += sx * xj;
        }
    }
}

struct StConsts {
    tau: f64,
    scale: f64,
}

impl StConsts {
    fn new(params: &ShrinkageParams, layout: &RowLayout, sigma: f64) -> Self {
        let ShrinkageParams::SoftThreshold { theta } = *params else {
            unreachable!("caller dispatches on kind")
        };
        let scale = (layout.antennas as f64).sqrt() * sigma;
        StConsts {
            tau: theta * scale,
            scale,
        }
    }
}

/// Replaces every 2x2 block by its complex-linear part.
fn project_complex(m: &mut Array2<f64>) {
    let n = m.nrows() / 2;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (m[[2 * i, 2 * j]], m[[2 * i, 2 * j + 1]]);
            let (c, d) = (m[[2 * i + 1, 2 * j]], m[[2 * i + 1, 2 * j + 1]]);
            let p = 0.5 * (a + d);
            let q = 0.5 * (c - b);
            m[[2 * i, 2 * j]] = p;
            m[[2 * i, 2 * j + 1]] = -q;
            m[[2 * i + 1, 2 * j]] = q;
            m[[2 * i + 1, 2 * j + 1]] = p;
        }
    }
}

fn add_outer(mut acc: ArrayViewMut2<'_, f64>, scale: f64, x: &ArrayView1<'_, f64>, y: &ArrayView1<'_, f64>) {
    for (i, &xi) in x.iter().enumerate() {
        let sx = scale * xi;
        for (j, &yj) in y.iter().enumerate() {
            acc[[i, j]] += sx * yj;
        }
    }
}

/// Applies the denoiser to every group of `r` and accumulates the Onsager
/// matrix.
pub fn shrink(
    params: &ShrinkageParams,
    layout: &RowLayout,
    r: ArrayView2<'_, f64>,
    sigma: f64,
) -> Result<ShrinkageEval> {
    check_sigma(sigma)?;
    params.validate()?;
    layout.check(&r)?;
    let width = layout.width();
    let g = layout.group_len;
    let rc = r.as_standard_layout();
    let rs = rc.as_slice().expect("standard layout");
    let mut out = vec![0.0; rs.len()];
    let mut ons = vec![0.0; width * width];
    let mut diag_sum = 0.0;
    match params {
        ShrinkageParams::SoftThreshold { .. } => {
            let k = StConsts::new(params, layout, sigma);
            for (row, o) in rs.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
                let rho = dot_self(row).sqrt();
                if rho > k.tau {
                    let gain = 1.0 - k.tau / rho;
                    for (o, &v) in o.iter_mut().zip(row) {
                        *o = gain * v;
                    }
                    diag_sum += gain;
                    add_outer_flat(&mut ons, k.tau / (rho * rho * rho), row);
                }
            }
        }
        ShrinkageParams::Mmse { .. } => {
            let k = MmseConsts::new(params, layout, sigma);
            let tk = k.theta3 * k.kappa;
            for (rg, og) in rs.chunks_exact(g * width).zip(out.chunks_exact_mut(g * width)) {
                let grp = k.group_flat(rg, width);
                for (t, (row, o)) in rg.chunks_exact(width).zip(og.chunks_exact_mut(width)).enumerate() {
                    let gain = tk * grp.w[t] - k.theta4;
                    for (o, &v) in o.iter_mut().zip(row) {
                        *o = gain * v;
                    }
                    diag_sum += gain;
                    let outer = tk * 2.0 * k.a * grp.w[t] * (1.0 - grp.w[t]);
                    if outer != 0.0 {
                        add_outer_flat(&mut ons, outer, row);
                    }
                }
            }
        }
    }
    for i in 0..width {
        ons[i * width + i] += diag_sum;
    }
    let output = Array2::from_shape_vec(r.raw_dim(), out).expect("shape matches input");
    let mut onsager = Array2::from_shape_vec((width, width), ons).expect("square");
    if layout.field == Field::Complex {
        project_complex(&mut onsager);
    }
    Ok(ShrinkageEval { output, onsager })
}

/// Vector-Jacobian product: gradients of `<grad_out, eta(r)>` with respect to
/// `r` and to the denoiser parameters (in `ShrinkageParams::to_vec` order).
pub fn shrink_vjp(
    params: &ShrinkageParams,
    layout: &RowLayout,
    r: ArrayView2<'_, f64>,
    sigma: f64,
    grad_out: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    check_sigma(sigma)?;
    params.validate()?;
    layout.check(&r)?;
    if grad_out.dim() != r.dim() {
        return Err(Error::Shape("gradient and input shapes differ".into()));
    }
    let width = layout.width();
    let g = layout.group_len;
    let rc = r.as_standard_layout();
    let rs = rc.as_slice().expect("standard layout");
    let gc = grad_out.as_standard_layout();
    let gs = gc.as_slice().expect("standard layout");
    let mut gr = vec![0.0; rs.len()];
    let mut grad_p = vec![0.0; params.len()];
    match params {
        ShrinkageParams::SoftThreshold { .. } => {
            let k = StConsts::new(params, layout, sigma);
            for ((row, gout), o) in rs
                .chunks_exact(width)
                .zip(gs.chunks_exact(width))
                .zip(gr.chunks_exact_mut(width))
            {
                let rho = dot_self(row).sqrt();
                if rho > k.tau {
                    let rg = dot(row, gout);
                    let gain = 1.0 - k.tau / rho;
                    let proj = k.tau * rg / (rho * rho * rho);
                    for ((o, &gv), &rv) in o.iter_mut().zip(gout).zip(row) {
                        *o = gain * gv + proj * rv;
                    }
                    grad_p[0] -= k.scale * rg / rho;
                }
            }
        }
        ShrinkageParams::Mmse { .. } => {
            let k = MmseConsts::new(params, layout, sigma);
            let s2 = k.sigma2;
            let dkappa = s2 / ((k.theta1 + s2) * (k.theta1 + s2));
            let da = k.c_m / layout.antennas as f64 / ((k.theta1 + s2) * (k.theta1 + s2));
            let dlog_k = k.c_m / (s2 + k.theta1);
            let tk = k.theta3 * k.kappa;
            let block = g * width;
            for ((rg, gg), og) in rs
                .chunks_exact(block)
                .zip(gs.chunks_exact(block))
                .zip(gr.chunks_exact_mut(block))
            {
                let grp = k.group_flat(rg, width);
                let rdotg: Vec<f64> = rg
                    .chunks_exact(width)
                    .zip(gg.chunks_exact(width))
                    .map(|(a, b)| dot(a, b))
                    .collect();
                let weighted: f64 = (0..g).map(|t| grp.w[t] * rdotg[t]).sum();
                let mean_norm2: f64 = (0..g).map(|t| grp.w[t] * grp.norm2[t]).sum();
                for (s_, ((row, gv), o)) in rg
                    .chunks_exact(width)
                    .zip(gg.chunks_exact(width))
                    .zip(og.chunks_exact_mut(width))
                    .enumerate()
                {
                    let ws = grp.w[s_];
                    let coef_g = tk * ws - k.theta4;
                    let coef_r = tk * 2.0 * k.a * ws * (rdotg[s_] - weighted);
                    for ((o, &gx), &rx) in o.iter_mut().zip(gv).zip(row) {
                        *o = coef_g * gx + coef_r * rx;
                    }
                    // Parameter derivatives of eta_s, contracted with g_s.
                    let d1 = k.theta3
                        * ws
                        * (dkappa + k.kappa * (da * (grp.norm2[s_] - mean_norm2) - grp.u * dlog_k));
                    grad_p[0] += d1 * rdotg[s_];
                    grad_p[1] -= tk * ws * grp.k_over_s * rdotg[s_];
                    grad_p[2] += k.kappa * ws * rdotg[s_];
                    grad_p[3] -= rdotg[s_];
                }
            }
        }
    }
    let grad_r = Array2::from_shape_vec(r.raw_dim(), gr).expect("shape matches input");
    Ok((grad_r, grad_p))
}

/// Full real Jacobian of one group: entry `(t*width + i, s*width + j)` is
/// `d eta_{t,i} / d r_{s,j}`.
pub fn group_jacobian(
    params: &ShrinkageParams,
    layout: &RowLayout,
    r_group: ArrayView2<'_, f64>,
    sigma: f64,
) -> Result<Array2<f64>> {
    check_sigma(sigma)?;
    params.validate()?;
    let single = RowLayout {
        group_len: r_group.nrows(),
        ..*layout
    };
    single.check(&r_group)?;
    let width = layout.width();
    let g = r_group.nrows();
    let mut jac = Array2::<f64>::zeros((g * width, g * width));
    match params {
        ShrinkageParams::SoftThreshold { .. } => {
            let k = StConsts::new(params, layout, sigma);
            for t in 0..g {
                let row = r_group.row(t);
                let rho = row.dot(&row).sqrt();
                if rho > k.tau {
                    let mut blk = jac.slice_mut(s![t * width..(t + 1) * width, t * width..(t + 1) * width]);
                    for i in 0..width {
                        blk[[i, i]] += 1.0 - k.tau / rho;
                    }
                    add_outer(blk, k.tau / (rho * rho * rho), &row, &row);
                }
            }
        }
        ShrinkageParams::Mmse { .. } => {
            let k = MmseConsts::new(params, layout, sigma);
            let grp = k.group(&r_group);
            let tk = k.theta3 * k.kappa;
            for t in 0..g {
                for s_ in 0..g {
                    let mut blk =
                        jac.slice_mut(s![t * width..(t + 1) * width, s_ * width..(s_ + 1) * width]);
                    if t == s_ {
                        for i in 0..width {
                            blk[[i, i]] += tk * grp.w[t] - k.theta4;
                        }
                        add_outer(blk, tk * 2.0 * k.a * grp.w[t] * (1.0 - grp.w[t]), &r_group.row(t), &r_group.row(t));
                    } else {
                        add_outer(blk, -tk * 2.0 * k.a * grp.w[t] * grp.w[s_], &r_group.row(t), &r_group.row(s_));
                    }
                }
            }
        }
    }
    Ok(jac)
}

/// Soft thresholding of single-antenna rows (`rows x components`).
pub fn st_scalar(r: ArrayView2<'_, f64>, sigma: f64, theta: f64, field: Field) -> Result<ShrinkageEval> {
    shrink(
        &ShrinkageParams::soft_threshold(theta),
        &RowLayout::new(field, 1, 1),
        r,
        sigma,
    )
}

/// Row-wise soft thresholding with threshold `theta sqrt(M) sigma`.
pub fn st_vector(
    r: ArrayView2<'_, f64>,
    sigma: f64,
    theta: f64,
    field: Field,
    antennas: usize,
) -> Result<ShrinkageEval> {
    shrink(
        &ShrinkageParams::soft_threshold(theta),
        &RowLayout::new(field, antennas, 1),
        r,
        sigma,
    )
}

fn require_mmse(params: &ShrinkageParams) -> Result<()> {
    match params {
        ShrinkageParams::Mmse { .. } => Ok(()),
        _ => Err(Error::InvalidParams("expected MMSE parameters".into())),
    }
}

/// MMSE denoiser on one single-antenna group (`(T_g + 1) x components`).
pub fn mmse_group_scalar(
    r_group: ArrayView2<'_, f64>,
    sigma: f64,
    params: &ShrinkageParams,
    field: Field,
) -> Result<Array2<f64>> {
    mmse_vector(r_group, sigma, params, field, 1)
}

/// Derivatives of the single-antenna group denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDerivative {
    /// `d eta_t / d r_t` (Wirtinger, conjugate fixed, in the complex field).
    pub per_entry: Vec<f64>,
    /// Contribution of the group to the divergence `b`.
    pub divergence: f64,
}

pub fn mmse_group_scalar_derivative(
    r_group: ArrayView2<'_, f64>,
    sigma: f64,
    params: &ShrinkageParams,
    field: Field,
) -> Result<GroupDerivative> {
    let jac = mmse_vector_jacobian(r_group, sigma, params, field, 1)?;
    let per_entry: Vec<f64> = jac.rows.iter().map(|b| b[[0, 0]]).collect();
    Ok(GroupDerivative {
        divergence: jac.onsager[[0, 0]],
        per_entry,
    })
}

/// MMSE denoiser on one multi-antenna group (`(T_g + 1) x M components`).
pub fn mmse_vector(
    r_group: ArrayView2<'_, f64>,
    sigma: f64,
    params: &ShrinkageParams,
    field: Field,
    antennas: usize,
) -> Result<Array2<f64>> {
    require_mmse(params)?;
    let layout = RowLayout::new(field, antennas, r_group.nrows());
    Ok(shrink(params, &layout, r_group, sigma)?.output)
}

/// Per-row Jacobians of the vector MMSE denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorJacobian {
    /// Real `width x width` Jacobian of each row with respect to itself.
    pub rows: Vec<Array2<f64>>,
    /// Their sum, projected onto complex-linear maps in the complex field.
    pub onsager: Array2<f64>,
}

pub fn mmse_vector_jacobian(
    r_group: ArrayView2<'_, f64>,
    sigma: f64,
    params: &ShrinkageParams,
    field: Field,
    antennas: usize,
) -> Result<VectorJacobian> {
    require_mmse(params)?;
    let layout = RowLayout::new(field, antennas, r_group.nrows());
    let full = group_jacobian(params, &layout, r_group, sigma)?;
    let w = layout.width();
    let mut rows: Vec<Array2<f64>> = (0..r_group.nrows())
        .map(|t| full.slice(s![t * w..(t + 1) * w, t * w..(t + 1) * w]).to_owned())
        .collect();
    let mut onsager = rows.iter().fold(Array2::zeros((w, w)), |acc, b| acc + b);
    if field == Field::Complex {
        project_complex(&mut onsager);
        for b in rows.iter_mut() {
            project_complex(b);
        }
    }
    Ok(VectorJacobian { rows, onsager })
}

/// The `q` helper, `q_t = (sum_s exp(a |r_s|^2) + K theta2) / exp(a |r_t|^2)`.
/// Overflows to infinity for extreme inputs; the denoisers never use it
/// directly.
pub fn q_helper(
    r_group: ArrayView2<'_, f64>,
    sigma: f64,
    params: &ShrinkageParams,
    field: Field,
    antennas: usize,
) -> Result<Array1<f64>> {
    require_mmse(params)?;
    check_sigma(sigma)?;
    let layout = RowLayout::new(field, antennas, r_group.nrows());
    layout.check(&r_group)?;
    let k = MmseConsts::new(params, &layout, sigma);
    Ok(k.group(&r_group).w.iter().map(|w| 1.0 / w).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mmse(t1: f64, t2: f64, t3: f64, t4: f64) -> ShrinkageParams {
        ShrinkageParams::Mmse {
            theta1: t1,
            theta2: t2,
            theta3: t3,
            theta4: t4,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn soft_threshold_closed_forms() {
        let e = st_scalar(array![[0.5]].view(), 1.0, 1.0, Field::Real).unwrap();
        assert_eq!(e.output[[0, 0]], 0.0);
        assert_eq!(e.scalar_divergence(), 0.0);
        let e = st_scalar(array![[3.0], [-3.0]].view(), 1.0, 1.0, Field::Real).unwrap();
        assert_eq!(e.output.column(0).to_vec(), vec![2.0, -2.0]);
        assert_eq!(e.scalar_divergence(), 2.0);
        // Boundary belongs to the zero branch.
        let e = st_scalar(array![[1.0]].view(), 1.0, 1.0, Field::Real).unwrap();
        assert_eq!(e.output[[0, 0]], 0.0);
    }

    #[test]
    fn complex_soft_threshold_divergence_is_wirtinger() {
        let r = array![[3.0, 4.0]];
        let e = st_scalar(r.view(), 1.0, 1.0, Field::Complex).unwrap();
        assert!((e.output[[0, 0]] - 3.0 * 0.8).abs() < 1e-15);
        assert!((e.scalar_divergence() - (1.0 - 1.0 / 10.0)).abs() < 1e-15);
        assert!(e.onsager[[1, 0]].abs() < 1e-15);
    }

    #[test]
    fn vector_soft_threshold() {
        let theta: f64 = 0.8;
        let sigma = 0.7;
        let m = 3;
        let tau = theta * (m as f64).sqrt() * sigma;
        let mut r = Array2::zeros((1, 3));
        r[[0, 0]] = 0.5 * tau;
        let e = st_vector(r.view(), sigma, theta, Field::Real, m).unwrap();
        assert!(e.output.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = randn(&mut rng, 40, 1, 2.0);
        let a = st_vector(r.view(), sigma, theta, Field::Real, 1).unwrap();
        let b = st_scalar(r.view(), sigma, theta, Field::Real).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let r = array![[1.0]];
        assert!(matches!(st_scalar(r.view(), 0.0, 1.0, Field::Real), Err(Error::NonPositiveSigma(_))));
        assert!(matches!(
            mmse_group_scalar(r.view(), -1.0, &mmse(1.0, 9.0, 1.0, 0.0), Field::Real),
            Err(Error::NonPositiveSigma(_))
        ));
        assert!(matches!(
            mmse_group_scalar(r.view(), 1.0, &mmse(0.0, 9.0, 1.0, 0.0), Field::Real),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn mmse_trivial_branches() {
        let zero = Array2::<f64>::zeros((4, 2));
        let p = mmse(1.0, 36.0, 1.0, 0.0);
        assert!(mmse_group_scalar(zero.view(), 0.5, &p, Field::Complex)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let r = array![[0.3], [-1.2], [2.0]];
        let lin = mmse_group_scalar(r.view(), 0.5, &mmse(1.0, 36.0, 0.0, 0.25), Field::Real).unwrap();
        assert_eq!(lin, r.mapv(|v| -0.25 * v));
        let d = mmse_group_scalar_derivative(r.view(), 0.5, &mmse(1.0, 36.0, 0.0, 0.25), Field::Real).unwrap();
        assert!(d.per_entry.iter().all(|&v| v == -0.25));
        let j = mmse_vector_jacobian(randn(&mut ChaCha8Rng::seed_from_u64(1), 2, 3, 1.0).view(), 0.5, &mmse(1.0, 36.0, 0.0, 0.25), Field::Real, 3).unwrap();
        for b in &j.rows {
            assert_eq!(b, &(Array2::<f64>::eye(3) * -0.25));
        }
    }

    #[test]
    fn q_helper_is_reciprocal_weight() {
        let r = array![[0.3], [-1.2]];
        let p = mmse(1.0, 36.0, 1.0, 0.0);
        let q = q_helper(r.view(), 0.8, &p, Field::Real, 1).unwrap();
        let s2 = 0.64;
        let a = 0.5 / (s2 * (1.0 + s2));
        let e: Vec<f64> = [0.09f64, 1.44].iter().map(|n| (a * n).exp()).collect();
        let k = (1.0 + 1.0 / s2).sqrt();
        let s = e[0] + e[1] + k * 36.0;
        assert!((q[0] - s / e[0]).abs() < 1e-12 * q[0]);
        assert!((q[1] - s / e[1]).abs() < 1e-12 * q[1]);
    }

    #[test]
    fn mmse_extreme_inputs_stay_finite() {
        let r = array![[1e3], [0.0], [-2.0], [1.0]];
        let p = mmse(1.0, 36.0, 1.0, 0.0);
        let out = mmse_group_scalar(r.view(), 0.1, &p, Field::Real).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[[0, 0]] - 1e3 / (1.0 + 0.01)).abs() < 1e-9);
        let big = Array2::from_elem((4, 16), 50.0);
        let out = mmse_vector(big.view(), 0.05, &p, Field::Complex, 8).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    fn fd_jacobian(params: &ShrinkageParams, layout: &RowLayout, r: &Array2<f64>, sigma: f64, h: f64) -> Array2<f64> {
        let n = r.len();
        let mut jac = Array2::zeros((n, n));
        for j in 0..n {
            let mut plus = r.clone();
            let mut minus = r.clone();
            plus.as_slice_mut().unwrap()[j] += h;
            minus.as_slice_mut().unwrap()[j] -= h;
            let fp = shrink(params, layout, plus.view(), sigma).unwrap().output;
            let fm = shrink(params, layout, minus.view(), sigma).unwrap().output;
            for i in 0..n {
                jac[[i, j]] = (fp.as_slice().unwrap()[i] - fm.as_slice().unwrap()[i]) / (2.0 * h);
            }
        }
        jac
    }

    fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cases = [
            (Field::Real, 1, 4),
            (Field::Real, 2, 2),
            (Field::Real, 3, 1),
            (Field::Complex, 1, 4),
            (Field::Complex, 2, 3),
        ];
        for (field, m, g) in cases {
            let layout = RowLayout::new(field, m, g);
            for trial in 0..20 {
                let sigma = 0.3 + rng.random::<f64>();
                let r = randn(&mut rng, g, layout.width(), 1.5);
                let params = [
                    mmse(0.5 + rng.random::<f64>(), 36.0 * rng.random::<f64>(), 0.5 + rng.random::<f64>(), 0.3 * rng.random::<f64>()),
                    ShrinkageParams::soft_threshold(0.5 + rng.random::<f64>()),
                ];
                for p in params {
                    if let ShrinkageParams::SoftThreshold { theta } = p {
                        let tau = theta * (m as f64).sqrt() * sigma;
                        if r.rows().into_iter().any(|row| (row.dot(&row).sqrt() - tau).abs() < 1e-3) {
                            continue;
                        }
                    }
                    let an = group_jacobian(&p, &layout, r.view(), sigma).unwrap();
                    let fd = fd_jacobian(&p, &layout, &r, sigma, 1e-6);
                    let err = max_rel(&an, &fd);
                    assert!(err < 1e-5, "{field} m={m} g={g} trial={trial} {p:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn vjp_agrees_with_jacobian_and_parameter_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (field, m, g) in [(Field::Real, 1, 4), (Field::Complex, 2, 2)] {
            let layout = RowLayout::new(field, m, g);
            let rows = 3 * g;
            let r = randn(&mut rng, rows, layout.width(), 1.2);
            let gout = randn(&mut rng, rows, layout.width(), 1.0);
            let sigma = 0.6;
            for p in [mmse(0.8, 20.0, 1.1, 0.05), ShrinkageParams::soft_threshold(0.9)] {
                let (gr, gp) = shrink_vjp(&p, &layout, r.view(), sigma, gout.view()).unwrap();
                // r-gradient through the explicit Jacobian, group by group.
                let w = layout.width();
                for k in 0..3 {
                    let rg = r.slice(s![k * g..(k + 1) * g, ..]);
                    let jac = group_jacobian(&p, &layout, rg, sigma).unwrap();
                    let gv = Array1::from_iter(gout.slice(s![k * g..(k + 1) * g, ..]).iter().copied());
                    let expect = jac.t().dot(&gv);
                    let got = Array1::from_iter(gr.slice(s![k * g..(k + 1) * g, ..]).iter().copied());
                    for (a, b) in got.iter().zip(expect.iter()) {
                        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b} (w={w})");
                    }
                }
                // Parameter gradient by central differences of <gout, eta>.
                let base = p.to_vec();
                for (i, &analytic) in gp.iter().enumerate() {
                    let h = 1e-6 * base[i].abs().max(1.0);
                    let eval = |d: f64| {
                        let mut q = p;
                        let mut v = base.clone();
                        v[i] += d;
                        q.set_from_slice(&v);
                        let out = shrink(&q, &layout, r.view(), sigma).unwrap().output;
                        (&out * &gout).sum()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {analytic} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn onsager_sums_diagonal_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = RowLayout::new(Field::Real, 2, 3);
        let r = randn(&mut rng, 12, 2, 1.0);
        let p = mmse(1.0, 10.0, 1.0, 0.0);
        let eval = shrink(&p, &layout, r.view(), 0.7).unwrap();
        let mut sum = Array2::<f64>::zeros((2, 2));
        for k in 0..4 {
            let j = mmse_vector_jacobian(r.slice(s![3 * k..3 * k + 3, ..]), 0.7, &p, Field::Real, 2).unwrap();
            sum = sum + &j.onsager;
        }
        assert!(max_rel(&eval.onsager, &sum) < 1e-12);
    }

    #[test]
    fn jacobian_is_identity_plus_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = randn(&mut rng, 3, 4, 1.0);
        let j = mmse_vector_jacobian(r.view(), 0.5, &mmse(1.0, 36.0, 1.0, 0.1), Field::Real, 4).unwrap();
        for (t, blk) in j.rows.iter().enumerate() {
            // Off-diagonal part equals c * r r^T, so rank one.
            let row = r.row(t);
            let (i, k) = (0, 1);
            let c = blk[[i, k]] / (row[i] * row[k]);
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        assert!((blk[[a, b]] - c * row[a] * row[b]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn phase_equivariance_in_complex_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rotate = |r: &Array2<f64>, alpha: f64| {
            let (c, s) = (alpha.cos(), alpha.sin());
            let mut out = r.clone();
            for mut row in out.rows_mut() {
                for m in 0..row.len() / 2 {
                    let (x, y) = (row[2 * m], row[2 * m + 1]);
                    row[2 * m] = c * x - s * y;
                    row[2 * m + 1] = s * x + c * y;
                }
            }
            out
        };
        for m in [1, 2] {
            let layout = RowLayout::new(Field::Complex, m, 4);
            let r = randn(&mut rng, 8, 2 * m, 1.3);
            for p in [mmse(1.0, 36.0, 1.2, 0.1), ShrinkageParams::soft_threshold(1.0)] {
                let alpha = 0.77;
                let a = shrink(&p, &layout, rotate(&r, alpha).view(), 0.6).unwrap().output;
                let b = rotate(&shrink(&p, &layout, r.view(), 0.6).unwrap().output, alpha);
                assert!(max_rel(&a, &b) < 1e-12);
            }
        }
    }

    #[test]
    fn single_antenna_vector_matches_group_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = randn(&mut rng, 4, 2, 1.0);
        let p = mmse(1.0, 36.0, 1.0, 0.0);
        assert_eq!(
            mmse_vector(r.view(), 0.4, &p, Field::Complex, 1).unwrap(),
            mmse_group_scalar(r.view(), 0.4, &p, Field::Complex).unwrap()
        );
    }

    #[test]
    fn defaults_for_paper_config() {
        let p = ShrinkageParams::default_for(DenoiserKind::Mmse, &SystemConfig::paper());
        match p {
            ShrinkageParams::Mmse { theta1, theta2, theta3, theta4 } => {
                assert_eq!(theta1, 1.0);
                assert!((theta2 - 36.0).abs() < 1e-12);
                assert_eq!((theta3, theta4), (1.0, 0.0));
            }
            _ => unreachable!(),
        }
        assert_eq!(
            ShrinkageParams::default_for(DenoiserKind::SoftThreshold, &SystemConfig::paper()),
            ShrinkageParams::soft_threshold(1.14)
        );
    }
}
