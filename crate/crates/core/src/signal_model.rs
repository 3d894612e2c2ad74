//! Pilots, the expanded measurement matrix, random user realizations and
//! received signals.
//!
//! Signals are stored in a real layout: an `rows x (antennas * components)`
//! matrix where antenna `m` occupies columns `m*c .. (m+1)*c` and `c` is 1 for
//! the real field and 2 (real, imaginary) for the complex field. The pilot
//! matrix is always real, so it acts on every real column independently.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Number field of channels and noise. Pilots are real in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Real,
    Complex,
}

impl Field {
    /// Real components per scalar.
    pub fn components(self) -> usize {
        match self {
            Field::Real => 1,
            Field::Complex => 2,
        }
    }

    /// Factor in front of `|r|^2 / sigma^2` in a Gaussian log-density.
    pub fn exponent_scale(self) -> f64 {
        match self {
            Field::Real => 0.5,
            Field::Complex => 1.0,
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Field::Real => "real",
            Field::Complex => "complex",
        })
    }
}

/// Scenario constants shared by data synthesis and the solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of users `N`.
    pub users: usize,
    /// Pilot length `L` in symbols.
    pub pilot_len: usize,
    /// Guard interval `T_g` in symbols.
    pub guard: usize,
    /// Largest symbol delay `D`.
    pub max_delay: usize,
    /// Per-user activity probability.
    pub p_active: f64,
    /// Receive antennas `M`.
    pub antennas: usize,
    pub snr_db: f64,
    /// Common large-scale attenuation.
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_field")]
    pub field: Field,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_phi() -> f64 {
    1.0
}

fn default_field() -> Field {
    Field::Complex
}

impl SystemConfig {
    /// N = 100, L = 40, T_g = D = 3, p_a = 0.1, one antenna, 0 dB, complex.
    pub fn paper() -> Self {
        SystemConfig {
            users: 100,
            pilot_len: 40,
            guard: 3,
            max_delay: 3,
            p_active: 0.1,
            antennas: 1,
            snr_db: 0.0,
            phi: 1.0,
            field: Field::Complex,
            base_seed: 2021,
        }
    }

    /// Smaller scenario for quick runs: N = 50, L = 20.
    pub fn desk() -> Self {
        SystemConfig {
            users: 50,
            pilot_len: 20,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.users == 0 {
            return fail("users must be at least 1");
        }
        if self.pilot_len == 0 {
            return fail("pilot_len must be at least 1");
        }
        if self.antennas == 0 {
            return fail("antennas must be at least 1");
        }
        if self.max_delay > self.guard {
            return fail("max_delay must not exceed guard");
        }
        if !(self.p_active > 0.0 && self.p_active < 1.0) {
            return fail("p_active must lie in (0, 1)");
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return fail("phi must be positive");
        }
        if !self.snr_db.is_finite() {
            return fail("snr_db must be finite");
        }
        Ok(())
    }

    /// Expanded pilot length `L + T_g`.
    pub fn l_tilde(&self) -> usize {
        self.pilot_len + self.guard
    }

    /// Number of (user, delay) hypotheses `N (T_g + 1)`.
    pub fn n_tilde(&self) -> usize {
        self.users * self.group_len()
    }

    pub fn group_len(&self) -> usize {
        self.guard + 1
    }

    pub fn sigma_z2(&self) -> f64 {
        self.phi / 10f64.powf(self.snr_db / 10.0)
    }

    /// Real columns of a received signal.
    pub fn width(&self) -> usize {
        self.antennas * self.field.components()
    }

    /// Probability that a user is active with one particular delay.
    pub fn p_active_delay(&self) -> f64 {
        self.p_active / self.group_len() as f64
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        SystemConfig {
            snr_db,
            ..self.clone()
        }
    }
}

/// Unit-norm real pilots, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSet {
    columns: Array2<f64>,
}

impl PilotSet {
    pub fn from_columns(columns: Array2<f64>) -> Result<Self> {
        if columns.nrows() == 0 || columns.ncols() == 0 {
            return Err(Error::Shape("pilot set must be non-empty".into()));
        }
        Ok(PilotSet { columns })
    }

    pub fn pilot_len(&self) -> usize {
        self.columns.nrows()
    }

    pub fn users(&self) -> usize {
        self.columns.ncols()
    }

    pub fn pilot(&self, n: usize) -> ArrayView1<'_, f64> {
        self.columns.column(n)
    }

    /// `L x N` matrix of pilots.
    pub fn columns(&self) -> ArrayView2<'_, f64> {
        self.columns.view()
    }
}

/// Draws i.i.d. N(0, 1/L) pilots and rescales each to unit norm.
pub fn generate_pilots(config: &SystemConfig, seed: u64) -> PilotSet {
    let (l, n) = (config.pilot_len, config.users);
    let mut rng = rng::stream(seed, "pilots", 0, Purpose::Pilots);
    let std = (1.0 / l as f64).sqrt();
    let mut columns = Array2::<f64>::zeros((l, n));
    for mut col in columns.columns_mut() {
        for v in col.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = std * z;
        }
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    PilotSet { columns }
}

/// `[0_t; pilot; 0_{T_g - t}]`.
pub fn expand_pilot(pilot: &[f64], delay: usize, guard: usize) -> Result<Vec<f64>> {
    if delay > guard {
        return Err(Error::DelayOutOfRange { delay, guard });
    }
    let mut out = vec![0.0; pilot.len() + guard];
    out[delay..delay + pilot.len()].copy_from_slice(pilot);
    Ok(out)
}

/// The `L~ x N~` matrix whose column `n (T_g + 1) + t` is pilot `n` delayed by `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedPilotMatrix {
    guard: usize,
    users: usize,
    matrix: Array2<f64>,
}

impl ExpandedPilotMatrix {
    pub fn guard(&self) -> usize {
        self.guard
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn group_len(&self) -> usize {
        self.guard + 1
    }

    pub fn l_tilde(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_tilde(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column_index(&self, user: usize, delay: usize) -> usize {
        user * self.group_len() + delay
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Wraps an arbitrary measurement matrix (e.g. i.i.d. Gaussian) whose
    /// columns are grouped in runs of `guard + 1`.
    pub fn from_matrix(matrix: Array2<f64>, guard: usize) -> Result<Self> {
        let g = guard + 1;
        if matrix.ncols() == 0 || matrix.ncols() % g != 0 {
            return Err(Error::Shape(format!(
                "{} columns cannot form groups of {g}",
                matrix.ncols()
            )));
        }
        Ok(ExpandedPilotMatrix {
            guard,
            users: matrix.ncols() / g,
            matrix,
        })
    }
}

pub fn build_expanded_matrix(pilots: &PilotSet, guard: usize) -> ExpandedPilotMatrix {
    let (l, n) = (pilots.pilot_len(), pilots.users());
    let g = guard + 1;
    let mut matrix = Array2::<f64>::zeros((l + guard, n * g));
    for user in 0..n {
        for t in 0..g {
            matrix
                .slice_mut(s![t..t + l, user * g + t])
                .assign(&pilots.pilot(user));
        }
    }
    ExpandedPilotMatrix {
        guard,
        users: n,
        matrix,
    }
}

/// Activity flags, delays and channels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub active: Vec<bool>,
    /// Present exactly for active users.
    pub delay: Vec<Option<usize>>,
    /// Large-scale attenuation per user.
    pub phi: Vec<f64>,
    /// `N x width` channels `h_n = sqrt(phi_n) g_n`; rows of inactive users are zero.
    pub channels: Array2<f64>,
}

impl GroundTruth {
    pub fn users(&self) -> usize {
        self.active.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Draws activity, delay and fading for every user.
///
/// The stream is consumed identically for every user regardless of the
/// outcome, so configurations differing only in `p_active` or the delay range
/// see common random numbers.
pub fn sample_ground_truth<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> GroundTruth {
    let n = config.users;
    let width = config.width();
    let fading_std = (1.0 / config.field.components() as f64).sqrt();
    let mut active = Vec::with_capacity(n);
    let mut delay = Vec::with_capacity(n);
    let mut channels = Array2::<f64>::zeros((n, width));
    let amp = config.phi.sqrt();
    for user in 0..n {
        let u_active: f64 = rng.random();
        let u_delay: f64 = rng.random();
        let is_active = u_active < config.p_active;
        let t = ((u_delay * (config.max_delay + 1) as f64) as usize).min(config.max_delay);
        let mut row = channels.row_mut(user);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            if is_active {
                *v = amp * fading_std * z;
            }
        }
        active.push(is_active);
        delay.push(is_active.then_some(t));
    }
    GroundTruth {
        active,
        delay,
        phi: vec![config.phi; n],
        channels,
    }
}

/// `N~ x width` matrix with row `(n, t_n)` equal to `h_n` for active users.
pub fn effective_channel(truth: &GroundTruth, guard: usize) -> Array2<f64> {
    let g = guard + 1;
    let width = truth.channels.ncols();
    let mut x = Array2::<f64>::zeros((truth.users() * g, width));
    for (user, d) in truth.delay.iter().enumerate() {
        if let Some(t) = d {
            x.row_mut(user * g + t).assign(&truth.channels.row(user));
        }
    }
    x
}

/// Noiseless received signal built user by user as a sum of delayed pilots,
/// without forming the expanded matrix.
pub fn superpose(pilots: &PilotSet, truth: &GroundTruth, guard: usize) -> Result<Array2<f64>> {
    let width = truth.channels.ncols();
    let mut y = Array2::<f64>::zeros((pilots.pilot_len() + guard, width));
    for (user, d) in truth.delay.iter().enumerate() {
        if let (true, Some(t)) = (truth.active[user], d) {
            let shifted = expand_pilot(&pilots.pilot(user).to_vec(), *t, guard)?;
            for (l, s) in shifted.iter().enumerate() {
                for j in 0..width {
                    y[[l, j]] += s * truth.channels[[user, j]];
                }
            }
        }
    }
    Ok(y)
}

/// True when every group of `group_len` rows has at most one nonzero row.
pub fn is_hierarchically_sparse(x: ArrayView2<'_, f64>, group_len: usize) -> bool {
    x.exact_chunks((group_len, x.ncols()))
        .into_iter()
        .all(|g| g.rows().into_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count() <= 1)
}

/// `y = S~ x + z` with per-scalar noise variance `sigma_z2`, split equally
/// across components in the complex field.
pub fn synthesize<R: Rng + ?Sized>(
    matrix: &ExpandedPilotMatrix,
    x: ArrayView2<'_, f64>,
    sigma_z2: f64,
    field: Field,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if x.nrows() != matrix.n_tilde() {
        return Err(Error::Shape(format!(
            "effective channel has {} rows, matrix has {} columns",
            x.nrows(),
            matrix.n_tilde()
        )));
    }
    let mut y = matrix.matrix().dot(&x);
    if sigma_z2 > 0.0 {
        let std = (sigma_z2 / field.components() as f64).sqrt();
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    Ok(y)
}

/// One received frame and what generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: u64,
    /// `L~ x width`.
    pub y: Array2<f64>,
    pub truth: GroundTruth,
}

impl Sample {
    pub fn x0(&self, guard: usize) -> Array2<f64> {
        effective_channel(&self.truth, guard)
    }
}

/// Samples sharing one configuration and one pilot matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SystemConfig,
    pub split: String,
    pub pilots: Arc<PilotSet>,
    pub matrix: Arc<ExpandedPilotMatrix>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates one sample of `split`. Channels and received signals are rounded
/// to single precision so that they survive persistence unchanged.
pub fn generate_sample(
    config: &SystemConfig,
    matrix: &ExpandedPilotMatrix,
    split: &str,
    index: u64,
) -> Sample {
    let mut users = rng::stream(config.base_seed, split, index, Purpose::Users);
    let mut noise = rng::stream(config.base_seed, split, index, Purpose::Noise);
    let mut truth = sample_ground_truth(config, &mut users);
    truth.channels.mapv_inplace(quantize);
    let x = effective_channel(&truth, config.guard);
    let mut y = synthesize(matrix, x.view(), config.sigma_z2(), config.field, &mut noise)
        .expect("dimensions derived from one config");
    y.mapv_inplace(quantize);
    Sample { index, y, truth }
}

/// Generates `count` samples under the pilots derived from `config.base_seed`.
pub fn generate_dataset(config: &SystemConfig, count: usize, split: &str) -> Result<Dataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
    }
    let pilots = generate_pilots(config, config.base_seed);
    let matrix = build_expanded_matrix(&pilots, config.guard);
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(config, &matrix, split, i))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        split: split.to_string(),
        pilots: Arc::new(pilots),
        matrix: Arc::new(matrix),
        samples,
    })
}
