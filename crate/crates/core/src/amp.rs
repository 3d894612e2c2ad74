//! Approximate message passing for single- and multi-antenna recovery, and
//! its Monte Carlo state evolution.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::shrinkage::{shrink, RowLayout, ShrinkageParams};
use crate::signal_model::{ExpandedPilotMatrix, Field};
use crate::unfold::{self, Mode, Stage};

/// Per-iteration record of one AMP run.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpTrace {
    /// `x_i` for `i = 1..=I`.
    pub estimates: Vec<Array2<f64>>,
    /// `v_i` for `i = 1..=I`.
    pub residuals: Vec<Array2<f64>>,
    /// `sigma_{i-1}` used by iteration `i`.
    pub sigma: Vec<f64>,
    /// Onsager matrix of iteration `i` (`1 x 1` real or `2 x 2` complex
    /// representation for a single antenna).
    pub divergence: Vec<Array2<f64>>,
}

impl AmpTrace {
    pub fn iterations(&self) -> usize {
        self.estimates.len()
    }

    pub fn last(&self) -> &Array2<f64> {
        self.estimates.last().expect("at least one iteration")
    }

    fn from_forward(trace: unfold::ForwardTrace) -> Self {
        let mut out = AmpTrace {
            estimates: Vec::new(),
            residuals: Vec::new(),
            sigma: Vec::new(),
            divergence: Vec::new(),
        };
        for layer in trace.layers {
            out.estimates.push(layer.xhat);
            out.residuals.push(layer.v);
            out.sigma.push(layer.sigma[0]);
            out.divergence.push(layer.onsager.into_iter().next().expect("one block"));
        }
        out
    }
}

/// AMP on an arbitrary measurement matrix. `y` holds one problem of
/// `layout.width()` columns.
pub fn amp(
    s_mat: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    layout: &RowLayout,
    params: &ShrinkageParams,
    iterations: usize,
    onsager: bool,
) -> Result<AmpTrace> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("AMP needs at least one iteration".into()));
    }
    if y.ncols() != layout.width() {
        return Err(Error::Shape(format!(
            "signal has {} columns, layout needs {}",
            y.ncols(),
            layout.width()
        )));
    }
    let w = s_mat.t();
    let stages = vec![Stage { w, params }; iterations];
    let trace = unfold::forward(
        s_mat,
        y,
        layout,
        &stages,
        Mode {
            onsager,
            frozen: None,
        },
    )?;
    Ok(AmpTrace::from_forward(trace))
}

/// Single-antenna AMP with group denoising over the delay hypotheses.
pub fn amp_smv(
    matrix: &ExpandedPilotMatrix,
    y: ArrayView2<'_, f64>,
    field: Field,
    params: &ShrinkageParams,
    iterations: usize,
) -> Result<AmpTrace> {
    let layout = RowLayout::new(field, 1, matrix.group_len());
    amp(matrix.matrix().view(), y, &layout, params, iterations, true)
}

/// Multi-antenna AMP with vector denoising; `y` is `L~ x M components`.
pub fn amp_mmv(
    matrix: &ExpandedPilotMatrix,
    y: ArrayView2<'_, f64>,
    field: Field,
    antennas: usize,
    params: &ShrinkageParams,
    iterations: usize,
) -> Result<AmpTrace> {
    let layout = RowLayout::new(field, antennas, matrix.group_len());
    amp(matrix.matrix().view(), y, &layout, params, iterations, true)
}

/// Source of effective-channel draws for state evolution.
pub trait Prior: Sync {
    fn layout(&self) -> RowLayout;
    /// `groups * group_len` rows of independent draws.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, groups: usize) -> Array2<f64>;
    /// `E ||x_row||^2`, averaged over rows.
    fn row_energy(&self) -> f64;
}

/// At most one active row per group, at a uniform position, with i.i.d.
/// Gaussian entries of total power `phi` per antenna.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupPrior {
    pub field: Field,
    pub antennas: usize,
    pub group_len: usize,
    pub p_active: f64,
    pub phi: f64,
}

impl Prior for GroupPrior {
    fn layout(&self) -> RowLayout {
        RowLayout::new(self.field, self.antennas, self.group_len)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, groups: usize) -> Array2<f64> {
        let width = self.layout().width();
        let std = (self.phi / self.field.components() as f64).sqrt();
        let mut x = Array2::zeros((groups * self.group_len, width));
        for g in 0..groups {
            let u: f64 = rng.random();
            let t = rng.random_range(0..self.group_len);
            if u < self.p_active {
                for j in 0..width {
                    x[[g * self.group_len + t, j]] = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        x
    }

    fn row_energy(&self) -> f64 {
        self.p_active * self.phi * self.antennas as f64 / self.group_len as f64
    }
}

/// Predicted effective noise per iteration with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEvolution {
    /// `delta_0^2, ..., delta_I^2`.
    pub delta2: Vec<f64>,
    /// Standard error of each entry (zero for the exact `delta_0^2`).
    pub stderr: Vec<f64>,
    pub mc_count: usize,
    pub sigma_z2: f64,
    pub l_tilde: usize,
    pub n_tilde: usize,
    pub antennas: usize,
}

impl StateEvolution {
    /// Predicted `E ||x_i - x||^2 / (N~ M)` after iteration `i >= 1`.
    pub fn predicted_mse(&self, i: usize) -> f64 {
        (self.delta2[i] - self.sigma_z2) * self.l_tilde as f64 / self.n_tilde as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeSetup {
    pub l_tilde: usize,
    pub n_tilde: usize,
    pub sigma_z2: f64,
    pub iterations: usize,
    /// Independent length-`N~` draws per iteration.
    pub mc_count: usize,
    pub seed: u64,
}

/// Runs the recursion
/// `delta_i^2 = sigma_z^2 + E ||eta(x + delta_{i-1} d; delta_{i-1}) - x||^2 / (L~ M)`,
/// started from the zero estimate.
pub fn state_evolution<P: Prior>(prior: &P, params: &ShrinkageParams, setup: &SeSetup) -> Result<StateEvolution> {
    if setup.mc_count == 0 {
        return Err(Error::InvalidArgument("mc_count must be at least 1".into()));
    }
    let layout = prior.layout();
    if setup.n_tilde % layout.group_len != 0 {
        return Err(Error::Shape("N~ is not a multiple of the group length".into()));
    }
    let groups = setup.n_tilde / layout.group_len;
    let scale = 1.0 / (setup.l_tilde * layout.antennas) as f64;
    let noise_std = (1.0 / layout.field.components() as f64).sqrt();
    let mut delta2 = vec![setup.sigma_z2 + prior.row_energy() * setup.n_tilde as f64 * scale];
    let mut stderr = vec![0.0];
    for it in 1..=setup.iterations {
        let delta = delta2[it - 1].sqrt();
        let errors: Vec<f64> = (0..setup.mc_count)
            .into_par_iter()
            .map(|draw| {
                let index = ((it as u64) << 40) | draw as u64;
                let mut rng = rng::stream(setup.seed, "state-evolution", index, Purpose::Prior);
                let x = prior.sample(&mut rng, groups);
                let r = x.mapv(|v| v + delta * noise_std * rng.sample::<f64, _>(StandardNormal));
                let out = shrink(params, &layout, r.view(), delta).map(|e| e.output)?;
                Ok((&out - &x).mapv(|v| v * v).sum())
            })
            .collect::<Result<_>>()?;
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = if errors.len() > 1 {
            errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        delta2.push(setup.sigma_z2 + scale * mean);
        stderr.push(scale * (var / n).sqrt());
    }
    Ok(StateEvolution {
        delta2,
        stderr,
        mc_count: setup.mc_count,
        sigma_z2: setup.sigma_z2,
        l_tilde: setup.l_tilde,
        n_tilde: setup.n_tilde,
        antennas: layout.antennas,
    })
}

/// Single-antenna state evolution.
pub fn state_evolution_smv<P: Prior>(prior: &P, params: &ShrinkageParams, setup: &SeSetup) -> Result<StateEvolution> {
    if prior.layout().antennas != 1 {
        return Err(Error::InvalidArgument("single-antenna prior expected".into()));
    }
    state_evolution(prior, params, setup)
}

/// Multi-antenna state evolution, normalized per antenna.
pub fn state_evolution_mmv<P: Prior>(prior: &P, params: &ShrinkageParams, setup: &SeSetup) -> Result<StateEvolution> {
    state_evolution(prior, params, setup)
}

/// I.i.d. `N(0, 1/rows)` matrix, the setting in which state evolution is exact
/// asymptotically.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, "gaussian-matrix", 0, Purpose::Matrix);
    let std = (1.0 / rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// Runs AMP column block by column block, one independent problem per block.
pub fn amp_columns(
    s_mat: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    layout: &RowLayout,
    params: &ShrinkageParams,
    iterations: usize,
) -> Result<Vec<AmpTrace>> {
    let w = layout.width();
    let blocks = unfold::block_count(y.ncols(), layout)?;
    (0..blocks)
        .map(|b| amp(s_mat, y.slice(s![.., b * w..(b + 1) * w]), layout, params, iterations, true))
        .collect()
}
