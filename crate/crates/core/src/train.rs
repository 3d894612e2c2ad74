//! Layer-by-layer training of tied LAMP models.
//!
//! For every layer `i` the schedule runs two phases: (a) the parameters of
//! layer `i` alone, fed with the outputs of the already trained layers, then
//! (b) all parameters of layers `1..=i` through the depth-`i` network. A final
//! phase learns `W` together with every layer. Each phase minimizes the
//! minibatch mean of `||x - x0||^2` with Adam and stops once the validation
//! loss has failed to improve on its best value for `patience` consecutive
//! evaluations; the best snapshot is then restored.
//!
//! Phase (a) only moves the parameters of layer `i`, so its inputs, noise
//! levels and targets are computed once per phase. `joint_max_steps` caps
//! phase (b) and the final phase separately from `max_steps`.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward, forward_cached, loss};
use crate::network::{LampModel, Structure};
use crate::rng::{self, Purpose};
use crate::shrinkage::{shrink, shrink_vjp, ShrinkageParams};
use crate::signal_model::Dataset;
use crate::unfold::{block_sigma, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Consecutive non-improving evaluations before a phase stops.
    pub patience: usize,
    /// Step cap per phase.
    pub max_steps: usize,
    /// Tighter step cap for the phases that run the whole network (the joint
    /// re-learning phases and the refinement), if set.
    pub joint_max_steps: Option<usize>,
    /// Minibatch steps between validation evaluations.
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Learn the front end in the final phase.
    pub learn_w: bool,
    /// Denoiser parameter indices kept at their initial values.
    pub freeze: Vec<usize>,
    /// Print one line per phase to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 7e-4,
            batch_size: 100,
            patience: 20,
            max_steps: 10_000,
            joint_max_steps: None,
            eval_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            learn_w: true,
            freeze: Vec::new(),
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size >= 1
            && self.patience >= 1
            && self.eval_every >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Adam moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn with(len: usize, cfg: &TrainConfig) -> Self {
        AdamState {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            ..Self::new(len)
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, rate: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("Adam parameter, gradient and state lengths differ".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= rate * mhat / (vhat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// A dataset viewed as independent blocks of `block_antennas` antennas.
pub struct BlockSet<'a> {
    data: &'a Dataset,
    block_antennas: usize,
    /// `(sample, block)` pairs.
    index: Vec<(usize, usize)>,
}

impl<'a> BlockSet<'a> {
    pub fn new(data: &'a Dataset, block_antennas: usize) -> Result<Self> {
        let m = data.config.antennas;
        if block_antennas == 0 || m % block_antennas != 0 {
            return Err(Error::Config(format!(
                "{m} antennas do not split into blocks of {block_antennas}"
            )));
        }
        let per = m / block_antennas;
        let index = (0..data.len())
            .flat_map(|s| (0..per).map(move |b| (s, b)))
            .collect();
        Ok(BlockSet {
            data,
            block_antennas,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn width(&self) -> usize {
        self.block_antennas * self.data.config.field.components()
    }

    /// Signals and targets of the selected blocks, side by side.
    pub fn assemble(&self, picks: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let w = self.width();
        let g = self.data.config.group_len();
        let lt = self.data.matrix.l_tilde();
        let nt = self.data.matrix.n_tilde();
        let mut y = Array2::zeros((lt, picks.len() * w));
        let mut x = Array2::zeros((nt, picks.len() * w));
        for (k, &p) in picks.iter().enumerate() {
            let (si, b) = self.index[p];
            let sample = &self.data.samples[si];
            let cols = b * w..(b + 1) * w;
            y.slice_mut(s![.., k * w..(k + 1) * w])
                .assign(&sample.y.slice(s![.., cols.clone()]));
            for (user, d) in sample.truth.delay.iter().enumerate() {
                if let Some(t) = d {
                    x.slice_mut(s![user * g + t, k * w..(k + 1) * w])
                        .assign(&sample.truth.channels.slice(s![user, cols.clone()]));
                }
            }
        }
        (y, x)
    }
}

/// Record of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub name: String,
    pub depth: usize,
    /// `(step, mean training loss since the previous evaluation, validation loss)`.
    pub evals: Vec<(usize, Option<f64>, f64)>,
    pub steps: usize,
    pub best_step: usize,
    pub best_val: f64,
    /// Validation loss recomputed after restoring the best snapshot.
    pub restored_val: f64,
}

impl PhaseLog {
    pub fn initial_val(&self) -> f64 {
        self.evals[0].2
    }

    /// The restored snapshot is the minimum recorded validation loss.
    pub fn snapshot_is_best(&self) -> bool {
        let min = self.evals.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
        self.best_val == min && self.restored_val == self.best_val
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub phases: Vec<PhaseLog>,
    /// Validation MSE of the depth-`i` output for `i = 1..=I` after training.
    pub layer_val_mse: Vec<f64>,
    /// The same before training.
    pub initial_layer_val_mse: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,depth,step,train_loss,val_loss\n");
        for p in &self.phases {
            for &(step, tr, val) in &p.evals {
                let tr = tr.map(|t| format!("{t:e}")).unwrap_or_default();
                let _ = writeln!(out, "{},{},{},{},{:e}", p.name, p.depth, step, tr, val);
            }
        }
        out
    }
}

const EVAL_CHUNK: usize = 500;

/// Per-layer validation MSE (mean over blocks) of the full-depth network.
pub fn layer_mse(model: &LampModel, val: &BlockSet<'_>) -> Result<Vec<f64>> {
    let depth = model.depth();
    let mut sums = vec![0.0; depth];
    let w = val.width();
    for chunk in (0..val.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let (y, x) = val.assemble(chunk);
        let trace = model.forward_batch(y.view(), depth, Mode::default())?;
        for (i, layer) in trace.layers.iter().enumerate() {
            sums[i] += loss(layer.xhat.view(), x.view(), 1.0);
        }
        debug_assert_eq!(y.ncols(), chunk.len() * w);
    }
    Ok(sums.into_iter().map(|s| s / val.len() as f64).collect())
}

fn depth_loss(model: &LampModel, set: &BlockSet<'_>, depth: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let (y, x) = set.assemble(chunk);
        let (out, _) = forward_cached(model, y.view(), depth)?;
        total += loss(out.view(), x.view(), 1.0);
    }
    Ok(total / set.len() as f64)
}

/// Inputs of layer `depth + 1` for a batch: `(r, sigma per block)`.
fn layer_input(model: &LampModel, y: ArrayView2<'_, f64>, depth: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let trace = model.forward_batch(y, depth, Mode::default())?;
    let (xprev, vprev) = match trace.layers.last() {
        Some(l) => (l.xhat.clone(), l.v.clone()),
        None => (Array2::zeros((model.matrix.n_tilde(), y.ncols())), y.to_owned()),
    };
    let sigma = block_sigma(vprev.view(), &model.layout());
    let r = model.w_for(depth).dot(&vprev) + xprev;
    Ok((r, sigma))
}

/// Frozen inputs of one layer for every block of a set.
struct LayerInputs {
    r: Array2<f64>,
    sigma: Vec<f64>,
    x: Array2<f64>,
    width: usize,
}

impl LayerInputs {
    fn compute(model: &LampModel, set: &BlockSet<'_>, layer: usize) -> Result<Self> {
        let w = set.width();
        let nt = model.matrix.n_tilde();
        let mut r = Array2::zeros((nt, set.len() * w));
        let mut x = Array2::zeros((nt, set.len() * w));
        let mut sigma = Vec::with_capacity(set.len());
        let all: Vec<usize> = (0..set.len()).collect();
        for (c, chunk) in all.chunks(EVAL_CHUNK).enumerate() {
            let (y, x0) = set.assemble(chunk);
            let (rc, sc) = layer_input(model, y.view(), layer)?;
            let cols = s![.., c * EVAL_CHUNK * w..(c * EVAL_CHUNK + chunk.len()) * w];
            r.slice_mut(cols).assign(&rc);
            x.slice_mut(cols).assign(&x0);
            sigma.extend(sc);
        }
        Ok(LayerInputs { r, sigma, x, width: w })
    }

    fn select(&self, picks: &[usize]) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
        let w = self.width;
        let nt = self.r.nrows();
        let mut r = Array2::zeros((nt, picks.len() * w));
        let mut x = Array2::zeros((nt, picks.len() * w));
        for (k, &p) in picks.iter().enumerate() {
            r.slice_mut(s![.., k * w..(k + 1) * w]).assign(&self.r.slice(s![.., p * w..(p + 1) * w]));
            x.slice_mut(s![.., k * w..(k + 1) * w]).assign(&self.x.slice(s![.., p * w..(p + 1) * w]));
        }
        (r, picks.iter().map(|&p| self.sigma[p]).collect(), x)
    }
}

fn single_layer(
    params: &ShrinkageParams,
    model: &LampModel,
    r: ArrayView2<'_, f64>,
    sigma: &[f64],
    target: ArrayView2<'_, f64>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let layout = model.layout();
    let w = layout.width();
    let blocks = sigma.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for b in 0..blocks {
        let cols = s![.., b * w..(b + 1) * w];
        let out = shrink(params, &layout, r.slice(cols), sigma[b])?.output;
        let diff = &out - &target.slice(cols);
        total += diff.iter().map(|d| d * d).sum::<f64>();
        if want_grad {
            let g = diff * (2.0 / blocks as f64);
            let (_, gp) = shrink_vjp(params, &layout, r.slice(cols), sigma[b], g.view())?;
            for (a, v) in grad.iter_mut().zip(gp) {
                *a += v;
            }
        }
    }
    Ok((total / blocks as f64, grad))
}

/// Which parameters a phase updates.
#[derive(Debug, Clone, Copy)]
enum PhaseKind {
    /// Layer `i` alone on precomputed inputs.
    Single(usize),
    /// Layers `0..depth` through the network.
    Network { depth: usize, learn_w: bool },
}

struct Trainer<'a, 'b> {
    cfg: &'a TrainConfig,
    train: &'a BlockSet<'b>,
    val: &'a BlockSet<'b>,
    phase_index: u64,
}

impl Trainer<'_, '_> {
    fn flatten(&self, model: &LampModel, kind: PhaseKind) -> Vec<f64> {
        let mut v = Vec::new();
        match kind {
            PhaseKind::Single(i) => v.extend(model.layers[i].to_vec()),
            PhaseKind::Network { depth, learn_w } => {
                for p in &model.layers[..depth] {
                    v.extend(p.to_vec());
                }
                if learn_w {
                    v.extend(model.w[0].iter().copied());
                }
            }
        }
        v
    }

    fn unflatten(&self, model: &mut LampModel, kind: PhaseKind, v: &[f64]) {
        let mut pos = 0;
        let put = |p: &mut ShrinkageParams, pos: &mut usize| {
            let n = p.len();
            let mut vals = v[*pos..*pos + n].to_vec();
            let old = p.to_vec();
            for &f in &self.cfg.freeze {
                if f < n {
                    vals[f] = old[f];
                }
            }
            p.set_from_slice(&vals);
            p.project();
            *pos += n;
        };
        match kind {
            PhaseKind::Single(i) => put(&mut model.layers[i], &mut pos),
            PhaseKind::Network { depth, learn_w } => {
                for p in model.layers[..depth].iter_mut() {
                    put(p, &mut pos);
                }
                if learn_w {
                    for (dst, &src) in model.w[0].iter_mut().zip(&v[pos..]) {
                        *dst = src;
                    }
                }
            }
        }
    }

    fn grads(&self, model: &LampModel, kind: PhaseKind, y: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>)> {
        let PhaseKind::Network { depth, learn_w } = kind else {
            unreachable!("single-layer phases use frozen inputs")
        };
        let blocks = (y.ncols() / self.train.width()) as f64;
        let (_, cache) = forward_cached(model, y, depth)?;
        let g = backward(model, &cache, x, blocks)?;
        let mut v: Vec<f64> = g.layers[..depth].iter().flatten().copied().collect();
        if learn_w {
            v.extend(g.w[0].iter().copied());
        }
        Ok((g.loss, v))
    }

    fn run(&mut self, model: &mut LampModel, kind: PhaseKind, name: String, frozen: Option<(&LayerInputs, &LayerInputs)>) -> Result<PhaseLog> {
        let cfg = self.cfg;
        let (depth, max_steps) = match kind {
            PhaseKind::Single(i) => (i + 1, cfg.max_steps),
            PhaseKind::Network { depth, .. } => (depth, cfg.joint_max_steps.unwrap_or(cfg.max_steps).min(cfg.max_steps)),
        };
        let evaluate = |m: &LampModel| -> Result<f64> {
            match (kind, frozen) {
                (PhaseKind::Single(i), Some((_, v))) => {
                    Ok(single_layer(&m.layers[i], m, v.r.view(), &v.sigma, v.x.view(), false)?.0)
                }
                _ => depth_loss(m, self.val, depth),
            }
        };
        let non_finite = |what: &str| Error::NonFinite {
            stage: format!("{what} in phase {name}"),
            index: 0,
        };
        let mut params = self.flatten(model, kind);
        let mut adam = AdamState::with(params.len(), cfg);
        let mut best = params.clone();
        let first = evaluate(model)?;
        if !first.is_finite() {
            return Err(non_finite("validation loss"));
        }
        let started = Instant::now();
        let mut log = PhaseLog {
            name: name.clone(),
            depth,
            evals: vec![(0, None, first)],
            steps: 0,
            best_step: 0,
            best_val: first,
            restored_val: first,
        };
        let mut rng = rng::stream(cfg.seed, "train", self.phase_index, Purpose::Shuffle);
        self.phase_index += 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut cursor = order.len();
        let mut since_best = 0;
        let mut running = 0.0;
        let mut running_n = 0;
        let batch = cfg.batch_size.min(self.train.len());
        while log.steps < max_steps {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let picks = &order[cursor..cursor + batch];
            cursor += batch;
            let (l, g) = match (kind, frozen) {
                (PhaseKind::Single(i), Some((t, _))) => {
                    let (r, sigma, x) = t.select(picks);
                    single_layer(&model.layers[i], model, r.view(), &sigma, x.view(), true)?
                }
                _ => {
                    let (y, x) = self.train.assemble(picks);
                    self.grads(model, kind, y.view(), x.view())?
                }
            };
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(non_finite("training loss"));
            }
            running += l;
            running_n += 1;
            adam_step(&mut params, &g, &mut adam, cfg.learning_rate)?;
            self.unflatten(model, kind, &params);
            params = self.flatten(model, kind);
            log.steps += 1;
            if log.steps % cfg.eval_every == 0 {
                let v = evaluate(model)?;
                if !v.is_finite() {
                    return Err(non_finite("validation loss"));
                }
                log.evals.push((log.steps, Some(running / running_n as f64), v));
                running = 0.0;
                running_n = 0;
                if v < log.best_val {
                    log.best_val = v;
                    log.best_step = log.steps;
                    best = params.clone();
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        break;
                    }
                }
            }
        }
        self.unflatten(model, kind, &best);
        log.restored_val = evaluate(model)?;
        if cfg.verbose {
            eprintln!(
                "phase {:<14} steps {:>6} best step {:>6} val {:.6e} -> {:.6e} [{:.1} s]",
                log.name,
                log.steps,
                log.best_step,
                log.initial_val(),
                log.best_val,
                started.elapsed().as_secs_f64()
            );
        }
        Ok(log)
    }
}

/// Runs the full schedule on a tied model whose blocks match `train` and
/// `val`.
pub fn train_tied(model: &mut LampModel, train: &BlockSet<'_>, val: &BlockSet<'_>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if !model.tied {
        return Err(Error::InvalidArgument("only tied models are trainable".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    if train.width() != model.layout().width() || val.width() != model.layout().width() {
        return Err(Error::Shape("block width differs from the model's".into()));
    }
    let mut log = TrainLog {
        initial_layer_val_mse: layer_mse(model, val)?,
        ..TrainLog::default()
    };
    let mut trainer = Trainer {
        cfg,
        train,
        val,
        phase_index: 0,
    };
    for i in 0..model.depth() {
        // The inputs of layer i stay fixed while it alone is trained.
        let tin = LayerInputs::compute(model, train, i)?;
        let vin = LayerInputs::compute(model, val, i)?;
        log.phases.push(trainer.run(model, PhaseKind::Single(i), format!("layer{}a", i + 1), Some((&tin, &vin)))?);
        drop((tin, vin));
        log.phases.push(trainer.run(
            model,
            PhaseKind::Network {
                depth: i + 1,
                learn_w: false,
            },
            format!("layer{}b", i + 1),
            None,
        )?);
    }
    if model.depth() > 0 {
        log.phases.push(trainer.run(
            model,
            PhaseKind::Network {
                depth: model.depth(),
                learn_w: cfg.learn_w,
            },
            "refine".into(),
            None,
        )?);
    }
    log.layer_val_mse = layer_mse(model, val)?;
    Ok(log)
}

fn check_structure(model: &LampModel, allowed: &[Structure]) -> Result<()> {
    let ok = allowed
        .iter()
        .any(|a| std::mem::discriminant(a) == std::mem::discriminant(&model.structure));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("structure {} not valid here", model.structure)))
    }
}

fn train_on(mut model: LampModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(LampModel, TrainLog)> {
    for d in [train, val] {
        if d.config.antennas != model.antennas || d.config.field != model.field || d.matrix.matrix() != model.matrix.matrix() {
            return Err(Error::Config("dataset does not match the model".into()));
        }
    }
    let b = model.block_antennas();
    let tr = BlockSet::new(train, b)?;
    let va = BlockSet::new(val, b)?;
    let log = train_tied(&mut model, &tr, &va, cfg)?;
    Ok((model, log))
}

/// Single-antenna training.
pub fn train_tied_lamp(model: LampModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(LampModel, TrainLog)> {
    check_structure(&model, &[Structure::Smv])?;
    train_on(model, train, val, cfg)
}

/// Vector-shrinkage training for centralized and hybrid models; hybrid frames
/// contribute one block per antenna subset.
pub fn train_tied_lamp_mmv(model: LampModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(LampModel, TrainLog)> {
    check_structure(&model, &[Structure::Centralized, Structure::Hybrid { groups: 1 }])?;
    train_on(model, train, val, cfg)
}

/// Distributed training: every antenna of every frame is one single-antenna
/// sample for the shared network.
pub fn train_lamp_d(model: LampModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(LampModel, TrainLog)> {
    check_structure(&model, &[Structure::Distributed])?;
    train_on(model, train, val, cfg)
}
