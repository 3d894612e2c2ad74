//! Experiment specifications and the pipeline behind the command-line tool:
//! dataset generation, training, evaluation, ROC tables and state evolution.
//!
//! An experiment is described by one TOML file. Every emitted table starts
//! with comment lines carrying the spec hash, the format version and the
//! seed, and reruns of an identical spec produce identical files.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amp::{state_evolution, GroupPrior, SeSetup};
use crate::detect::{
    calibrate_threshold, evaluate, missed_at_false_alarm, roc_sweep, threshold_grid, MetricReport, RocPoint,
    ScoredSample,
};
use crate::error::{Error, Result};
use crate::network::{LampModel, Structure};
use crate::omp::{default_cap, omp};
use crate::persist::FORMAT_VERSION;
use crate::shrinkage::{DenoiserKind, ShrinkageParams};
use crate::signal_model::{generate_dataset, Dataset, Field, SystemConfig};
use crate::train::{train_lamp_d, train_tied_lamp, train_tied_lamp_mmv, TrainConfig, TrainLog};
use crate::unfold::Mode;

/// Detection and estimation methods that can be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    AmpSt,
    AmpMmse,
    LampSt,
    LampMmse,
    LampD,
    LampCSt,
    LampCMmse,
    /// Hybrid network with the given number of antenna subsets.
    LampH(usize),
    Omp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::AmpSt => f.write_str("amp_st"),
            Method::AmpMmse => f.write_str("amp_mmse"),
            Method::LampSt => f.write_str("lamp_st"),
            Method::LampMmse => f.write_str("lamp_mmse"),
            Method::LampD => f.write_str("lamp_d"),
            Method::LampCSt => f.write_str("lamp_c_st"),
            Method::LampCMmse => f.write_str("lamp_c_mmse"),
            Method::LampH(u) => write!(f, "lamp_h({u})"),
            Method::Omp => f.write_str("omp"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.as_str() {
            "amp_st" => Method::AmpSt,
            "amp_mmse" => Method::AmpMmse,
            "lamp_st" => Method::LampSt,
            "lamp_mmse" => Method::LampMmse,
            "lamp_d" => Method::LampD,
            "lamp_c_st" => Method::LampCSt,
            "lamp_c_mmse" => Method::LampCMmse,
            "omp" => Method::Omp,
            _ => {
                let u = t
                    .strip_prefix("lamp_h(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|u| u.parse::<usize>().ok())
                    .filter(|&u| u >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))?;
                Method::LampH(u)
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Method {
    /// Network structure and denoiser at `antennas`, `None` for OMP. Single
    /// antenna methods run per antenna when there are several.
    pub fn network(&self, antennas: usize) -> Result<Option<(Structure, DenoiserKind)>> {
        let per_antenna = if antennas == 1 { Structure::Smv } else { Structure::Distributed };
        let vector = if antennas == 1 { Structure::Smv } else { Structure::Centralized };
        let out = match self {
            Method::AmpSt | Method::LampSt => Some((per_antenna, DenoiserKind::SoftThreshold)),
            Method::AmpMmse | Method::LampMmse => Some((per_antenna, DenoiserKind::Mmse)),
            Method::LampD => Some((per_antenna, DenoiserKind::Mmse)),
            Method::LampCSt => Some((vector, DenoiserKind::SoftThreshold)),
            Method::LampCMmse => Some((vector, DenoiserKind::Mmse)),
            Method::LampH(u) => {
                let s = Structure::Hybrid { groups: *u };
                s.block_antennas(antennas)?;
                Some((s, DenoiserKind::Mmse))
            }
            Method::Omp => None,
        };
        Ok(out)
    }

    pub fn is_trained(&self) -> bool {
        !matches!(self, Method::AmpSt | Method::AmpMmse | Method::Omp)
    }
}

/// Untrained model of `method`, `None` for OMP.
pub fn init_model(method: Method, data: &Dataset, depth: usize) -> Result<Option<LampModel>> {
    let Some((structure, kind)) = method.network(data.config.antennas)? else {
        return Ok(None);
    };
    let mut m = LampModel::init(data.matrix.clone(), structure, depth, kind, &data.config, true)?;
    m.lineage.insert("method".into(), method.to_string());
    m.lineage.insert("base_seed".into(), data.config.base_seed.to_string());
    Ok(Some(m))
}

/// Trains `method` on `train`, validating on `val`. Untrained methods come
/// back at their initial parameters with an empty log.
pub fn train_method(
    method: Method,
    train: &Dataset,
    val: &Dataset,
    depth: usize,
    cfg: &TrainConfig,
) -> Result<Option<(LampModel, TrainLog)>> {
    let Some(mut model) = init_model(method, train, depth)? else {
        return Ok(None);
    };
    if !method.is_trained() {
        return Ok(Some((model, TrainLog::default())));
    }
    model.lineage.insert("train_seed".into(), cfg.seed.to_string());
    let out = match model.structure {
        Structure::Smv => train_tied_lamp(model, train, val, cfg)?,
        Structure::Distributed => train_lamp_d(model, train, val, cfg)?,
        Structure::Centralized | Structure::Hybrid { .. } => train_tied_lamp_mmv(model, train, val, cfg)?,
    };
    Ok(Some(out))
}

/// Scores of every test frame under a network.
pub fn score_model(model: &LampModel, data: &Dataset) -> Result<Vec<ScoredSample>> {
    let frames: Vec<_> = data.samples.iter().map(|s| s.y.view()).collect();
    let est = model.forward_frames(&frames)?;
    est.iter()
        .zip(&data.samples)
        .map(|(e, s)| ScoredSample::new(e.view(), &s.truth))
        .collect()
}

/// Scores of every test frame under OMP with the default cap.
pub fn score_omp(data: &Dataset) -> Result<Vec<ScoredSample>> {
    let cap = default_cap(data.config.p_active, data.config.users);
    let s = data.matrix.matrix();
    let g = data.config.group_len();
    data.samples
        .par_iter()
        .map(|smp| {
            let r = omp(smp.y.view(), s.view(), g, cap)?;
            ScoredSample::new(r.estimate.view(), &smp.truth)
        })
        .collect()
}

/// Threshold-based summary of one method on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEval {
    pub roc: Vec<RocPoint>,
    /// Threshold calibrated to the target false alarm on the same set.
    pub threshold: f64,
    pub at_target: MetricReport,
    /// Missed detection read off the ROC at the target false alarm.
    pub missed_at_target: Option<f64>,
}

pub fn summarize(scores: &[ScoredSample], grid_points: usize, target_fa: f64) -> Result<MethodEval> {
    let roc = roc_sweep(scores, &threshold_grid(scores, grid_points))?;
    let threshold = calibrate_threshold(scores, target_fa)?;
    Ok(MethodEval {
        missed_at_target: missed_at_false_alarm(&roc, target_fa),
        at_target: evaluate(scores, threshold),
        roc,
        threshold,
    })
}

/// Named scenario presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// N = 100, L = 40, T_g = D = 3, p_a = 0.1, 0 dB, 10^5 training frames.
    #[default]
    Paper,
    /// N = 50, L = 20, 10^4 training frames.
    Desk,
}

impl Preset {
    pub fn scenario(self) -> SystemConfig {
        match self {
            Preset::Paper => SystemConfig::paper(),
            Preset::Desk => SystemConfig::desk(),
        }
    }

    pub fn sizes(self) -> DataSizes {
        match self {
            Preset::Paper => DataSizes {
                train: 100_000,
                validation: 5_000,
                test: 5_000,
            },
            Preset::Desk => DataSizes {
                train: 10_000,
                validation: 1_000,
                test: 1_000,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Scenario fields that override the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOverrides {
    pub users: Option<usize>,
    pub pilot_len: Option<usize>,
    pub guard: Option<usize>,
    pub max_delay: Option<usize>,
    pub p_active: Option<f64>,
    pub antennas: Option<usize>,
    pub snr_db: Option<f64>,
    pub phi: Option<f64>,
    pub field: Option<Field>,
}

/// Sweep axes. Empty lists fall back to the single scenario value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// Test SNRs in dB.
    pub snr_db: Vec<f64>,
    /// Delay spreads; each value sets both the guard length and the maximal
    /// delay.
    pub guard: Vec<usize>,
    pub antennas: Vec<usize>,
    /// Quantile points of the ROC threshold grid.
    pub threshold_points: usize,
    pub target_false_alarm: f64,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep {
            snr_db: Vec::new(),
            guard: Vec::new(),
            antennas: Vec::new(),
            threshold_points: 400,
            target_false_alarm: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeOptions {
    pub iterations: usize,
    pub mc_count: usize,
    /// Also run AMP on this many test frames and report its MSE.
    pub empirical_frames: usize,
}

impl Default for SeOptions {
    fn default() -> Self {
        SeOptions {
            iterations: 10,
            mc_count: 10_000,
            empirical_frames: 1_000,
        }
    }
}

/// One experiment, as read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub scenario: ScenarioOverrides,
    #[serde(default)]
    pub data: Option<DataSizes>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub se: SeOptions,
    /// Overrides the scenario seed and the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_depth() -> usize {
    10
}

fn default_methods() -> Vec<Method> {
    vec![Method::AmpSt, Method::AmpMmse, Method::LampSt, Method::LampMmse, Method::Omp]
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        toml::from_str("").expect("empty spec uses defaults")
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Scenario with preset values, overrides and the seed applied.
    pub fn base(&self) -> SystemConfig {
        let mut c = self.preset.scenario();
        let o = &self.scenario;
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { c.$f = v; })* };
        }
        apply!(users, pilot_len, guard, max_delay, p_active, antennas, snr_db, phi, field);
        if o.guard.is_some() && o.max_delay.is_none() {
            c.max_delay = c.guard;
        }
        if let Some(s) = self.seed {
            c.base_seed = s;
        }
        c
    }

    pub fn sizes(&self) -> DataSizes {
        self.data.unwrap_or_else(|| self.preset.sizes())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    /// Training scenarios: one per (antennas, guard) pair of the sweep.
    pub fn scenarios(&self) -> Vec<SystemConfig> {
        let base = self.base();
        let ms = if self.sweep.antennas.is_empty() { vec![base.antennas] } else { self.sweep.antennas.clone() };
        let gs = if self.sweep.guard.is_empty() { vec![base.guard] } else { self.sweep.guard.clone() };
        let mut out = Vec::new();
        for &m in &ms {
            for &g in &gs {
                let mut c = base.clone();
                c.antennas = m;
                if !self.sweep.guard.is_empty() {
                    c.guard = g;
                    c.max_delay = g;
                }
                out.push(c);
            }
        }
        out
    }

    pub fn test_snrs(&self) -> Vec<f64> {
        if self.sweep.snr_db.is_empty() {
            vec![self.base().snr_db]
        } else {
            self.sweep.snr_db.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.sizes();
        if sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods listed".into()));
        }
        let t = self.sweep.target_false_alarm;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("target false alarm {t} outside (0, 1)")));
        }
        if self.sweep.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR values must be finite".into()));
        }
        self.train_config().validate()?;
        for c in self.scenarios() {
            c.validate()?;
            for m in &self.methods {
                m.network(c.antennas)
                    .map_err(|e| Error::Config(format!("method {m} at {} antennas: {e}", c.antennas)))?;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical form of the resolved spec.
    pub fn hash(&self) -> String {
        let mut resolved = self.clone();
        resolved.output = None;
        #[derive(Serialize)]
        struct Canonical<'a> {
            spec: &'a ExperimentSpec,
            base: SystemConfig,
            sizes: DataSizes,
            format_version: u32,
        }
        let text = serde_json::to_string(&Canonical {
            spec: &resolved,
            base: self.base(),
            sizes: self.sizes(),
            format_version: FORMAT_VERSION,
        })
        .expect("spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Directory name of a training scenario.
pub fn scenario_tag(c: &SystemConfig) -> String {
    format!("m{}_tg{}", c.antennas, c.guard)
}

fn snr_tag(snr: f64) -> String {
    format!("test_snr{snr}")
}

/// Output layout of an experiment.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self, c: &SystemConfig, split: &str) -> PathBuf {
        self.root.join("data").join(scenario_tag(c)).join(split)
    }

    pub fn model(&self, c: &SystemConfig, m: Method) -> PathBuf {
        self.root.join("models").join(scenario_tag(c)).join(m.to_string())
    }

    pub fn table(&self, name: &str) -> PathBuf {
        self.root.join("tables").join(name)
    }
}

/// Writes a CSV table preceded by `#` comment lines with the lineage.
pub fn write_table(path: &Path, spec: &ExperimentSpec, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    writeln!(buf, "# spec_hash={}", spec.hash()).expect("write to memory");
    writeln!(buf, "# format_version={FORMAT_VERSION}").expect("write to memory");
    writeln!(buf, "# base_seed={}", spec.base().base_seed).expect("write to memory");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
        for r in rows {
            w.write_record(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

fn num(v: f64) -> String {
    format!("{v:.6e}")
}

/// Generates and stores the training, validation and per-SNR test sets of
/// every scenario. Returns the dataset directories.
pub fn cmd_gen_data(spec: &ExperimentSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let layout = Layout { root: out.to_path_buf() };
    let sizes = spec.sizes();
    let hash = spec.hash();
    let mut written = Vec::new();
    for c in spec.scenarios() {
        for (split, count, cfg) in [("train", sizes.train, c.clone()), ("validation", sizes.validation, c.clone())] {
            let d = generate_dataset(&cfg, count, split)?;
            let dir = layout.data(&c, split);
            d.save(&dir, Some(&hash))?;
            written.push(dir);
        }
        for snr in spec.test_snrs() {
            let d = generate_dataset(&c.with_snr(snr), sizes.test, "test")?;
            let dir = layout.data(&c, &snr_tag(snr));
            d.save(&dir, Some(&hash))?;
            written.push(dir);
        }
    }
    Ok(written)
}

fn load_checked(dir: &Path, expect: &SystemConfig) -> Result<Dataset> {
    let d = Dataset::load(dir)?;
    let c = &d.config;
    let same = c.users == expect.users
        && c.pilot_len == expect.pilot_len
        && c.guard == expect.guard
        && c.antennas == expect.antennas
        && c.field == expect.field
        && c.base_seed == expect.base_seed;
    if !same {
        return Err(Error::Config(format!(
            "dataset {} does not match the experiment scenario",
            dir.display()
        )));
    }
    Ok(d)
}

/// Trains every trainable method of every scenario and stores models and
/// training logs.
pub fn cmd_train(spec: &ExperimentSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let layout = Layout { root: out.to_path_buf() };
    let cfg = spec.train_config();
    let hash = spec.hash();
    let mut written = Vec::new();
    for c in spec.scenarios() {
        let train = load_checked(&layout.data(&c, "train"), &c)?;
        let val = load_checked(&layout.data(&c, "validation"), &c)?;
        for &m in spec.methods.iter().filter(|m| m.is_trained()) {
            let (model, log) = train_method(m, &train, &val, spec.depth, &cfg)?.expect("trained methods have networks");
            let dir = layout.model(&c, m);
            model.save(&dir, Some(&hash))?;
            let rows: Vec<Vec<String>> = log
                .phases
                .iter()
                .flat_map(|p| {
                    p.evals.iter().map(move |&(step, tr, val)| {
                        vec![p.name.clone(), p.depth.to_string(), step.to_string(), opt(tr), num(val)]
                    })
                })
                .collect();
            write_table(&dir.join("trainlog.csv"), spec, &["phase", "depth", "step", "train_loss", "val_loss"], &rows)?;
            let layers: Vec<Vec<String>> = log
                .layer_val_mse
                .iter()
                .zip(&log.initial_layer_val_mse)
                .enumerate()
                .map(|(i, (a, b))| vec![(i + 1).to_string(), num(*b), num(*a)])
                .collect();
            write_table(&dir.join("layers.csv"), spec, &["layer", "initial_val_mse", "trained_val_mse"], &layers)?;
            written.push(dir);
        }
    }
    Ok(written)
}

fn model_for(spec: &ExperimentSpec, layout: &Layout, c: &SystemConfig, m: Method, test: &Dataset) -> Result<Option<LampModel>> {
    if m.is_trained() {
        let dir = layout.model(c, m);
        if !dir.exists() {
            return Err(Error::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "model missing, run train first"),
            ));
        }
        Ok(Some(LampModel::load(&dir)?))
    } else {
        init_model(m, test, spec.depth)
    }
}

fn scores_for(model: Option<&LampModel>, test: &Dataset) -> Result<Vec<ScoredSample>> {
    match model {
        Some(m) => score_model(m, test),
        None => score_omp(test),
    }
}

/// Metrics at the calibrated false alarm for every method, scenario and SNR.
pub fn cmd_eval(spec: &ExperimentSpec, out: &Path) -> Result<PathBuf> {
    let layout = Layout { root: out.to_path_buf() };
    let mut rows = Vec::new();
    for c in spec.scenarios() {
        for snr in spec.test_snrs() {
            let test = load_checked(&layout.data(&c, &snr_tag(snr)), &c)?;
            // Missing models are reported before any evaluation work.
            let models = spec
                .methods
                .iter()
                .map(|&m| model_for(spec, &layout, &c, m, &test))
                .collect::<Result<Vec<_>>>()?;
            for (&m, model) in spec.methods.iter().zip(&models) {
                let scores = scores_for(model.as_ref(), &test)?;
                let e = summarize(&scores, spec.sweep.threshold_points, spec.sweep.target_false_alarm)?;
                let r = &e.at_target;
                rows.push(vec![
                    m.to_string(),
                    c.antennas.to_string(),
                    c.guard.to_string(),
                    snr.to_string(),
                    num(e.threshold),
                    opt(r.missed_detection),
                    opt(r.false_alarm),
                    opt(r.delay_error),
                    opt(r.nmse),
                    num(r.mse),
                    opt(e.missed_at_target),
                ]);
            }
        }
    }
    let path = layout.table("metrics.csv");
    write_table(
        &path,
        spec,
        &[
            "method",
            "antennas",
            "guard",
            "snr_db",
            "threshold",
            "missed_detection",
            "false_alarm",
            "delay_error",
            "nmse",
            "mse",
            "roc_missed_at_target",
        ],
        &rows,
    )?;
    Ok(path)
}

/// One ROC row per threshold per method, per scenario, at the first test SNR.
pub fn cmd_roc(spec: &ExperimentSpec, out: &Path) -> Result<PathBuf> {
    let layout = Layout { root: out.to_path_buf() };
    let snr = spec.test_snrs()[0];
    let mut rows = Vec::new();
    for c in spec.scenarios() {
        let test = load_checked(&layout.data(&c, &snr_tag(snr)), &c)?;
        for &m in &spec.methods {
            let model = model_for(spec, &layout, &c, m, &test)?;
            let scores = scores_for(model.as_ref(), &test)?;
            let roc = roc_sweep(&scores, &threshold_grid(&scores, spec.sweep.threshold_points))?;
            for p in roc {
                rows.push(vec![
                    m.to_string(),
                    c.antennas.to_string(),
                    c.guard.to_string(),
                    snr.to_string(),
                    num(p.threshold),
                    num(p.false_alarm),
                    num(p.missed_detection),
                ]);
            }
        }
    }
    let path = layout.table("roc.csv");
    write_table(
        &path,
        spec,
        &["method", "antennas", "guard", "snr_db", "threshold", "false_alarm", "missed_detection"],
        &rows,
    )?;
    Ok(path)
}

/// State-evolution table of AMP with the default MMSE denoiser for the base
/// scenario, next to the per-iteration MSE of AMP on generated frames.
pub fn cmd_se(spec: &ExperimentSpec, out: &Path) -> Result<PathBuf> {
    let c = spec.base();
    c.validate()?;
    let prior = GroupPrior {
        field: c.field,
        antennas: c.antennas,
        group_len: c.group_len(),
        p_active: c.p_active,
        phi: c.phi,
    };
    let params = ShrinkageParams::default_for(DenoiserKind::Mmse, &c);
    let setup = SeSetup {
        l_tilde: c.l_tilde(),
        n_tilde: c.n_tilde(),
        sigma_z2: c.sigma_z2(),
        iterations: spec.se.iterations,
        mc_count: spec.se.mc_count,
        seed: c.base_seed,
    };
    let se = state_evolution(&prior, &params, &setup)?;
    let mut empirical = vec![None; spec.se.iterations + 1];
    if spec.se.empirical_frames > 0 && spec.se.iterations > 0 {
        let data = generate_dataset(&c, spec.se.empirical_frames, "state-evolution")?;
        let model = LampModel::init(data.matrix.clone(), Structure::Centralized, spec.se.iterations, DenoiserKind::Mmse, &c, true)?;
        let scale = 1.0 / (c.n_tilde() * c.antennas) as f64;
        let per_frame: Vec<Vec<f64>> = data
            .samples
            .par_iter()
            .map(|s| {
                let x0 = s.x0(c.guard);
                let t = model.forward_batch(s.y.view(), spec.se.iterations, Mode::default())?;
                Ok(t.layers
                    .iter()
                    .map(|l| (&l.xhat - &x0).iter().map(|v| v * v).sum::<f64>() * scale)
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (i, e) in empirical.iter_mut().enumerate().skip(1) {
            *e = Some(per_frame.iter().map(|f| f[i - 1]).sum::<f64>() / per_frame.len() as f64);
        }
    }
    let rows: Vec<Vec<String>> = (0..=spec.se.iterations)
        .map(|i| {
            vec![
                i.to_string(),
                num(se.delta2[i]),
                num(se.stderr[i]),
                if i == 0 { String::new() } else { num(se.predicted_mse(i)) },
                opt(empirical[i]),
            ]
        })
        .collect();
    let path = Layout { root: out.to_path_buf() }.table("state_evolution.csv");
    write_table(&path, spec, &["iteration", "delta2", "stderr", "predicted_mse", "empirical_mse"], &rows)?;
    Ok(path)
}

/// Data generation, training, evaluation and ROC tables in one go.
pub fn cmd_sweep(spec: &ExperimentSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = cmd_gen_data(spec, out)?;
    written.extend(cmd_train(spec, out)?);
    written.push(cmd_eval(spec, out)?);
    written.push(cmd_roc(spec, out)?);
    Ok(written)
}

/// Shared pilot matrix check used when comparing scenarios.
pub fn same_matrix(a: &Dataset, b: &Dataset) -> bool {
    Arc::ptr_eq(&a.matrix, &b.matrix) || a.matrix.matrix() == b.matrix.matrix()
}
