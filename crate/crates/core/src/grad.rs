//! Reverse-mode gradients of the squared-error loss of a LAMP model.
//!
//! Noise levels and Onsager matrices are constants of the backward pass. The
//! finite-difference oracle honours the same convention by replaying them
//! from the unperturbed forward pass.

use ndarray::{s, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::network::LampModel;
use crate::shrinkage::shrink_vjp;
use crate::unfold::{ForwardTrace, Mode};

/// Per-layer values kept for the backward pass.
pub type ForwardCache = ForwardTrace;

/// Gradients with the shapes of the model's learnable set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// One entry per stored front end (`N~ x L~`).
    pub w: Vec<Array2<f64>>,
    /// Per-layer denoiser parameter gradients.
    pub layers: Vec<Vec<f64>>,
    pub loss: f64,
}

/// `sum ||x - target||^2 / norm`.
pub fn loss(xhat: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, norm: f64) -> f64 {
    Zip::from(&xhat)
        .and(&target)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / norm
}

/// Forward pass over the first `depth` layers on a batch of blocks.
pub fn forward_cached(model: &LampModel, y: ArrayView2<'_, f64>, depth: usize) -> Result<(Array2<f64>, ForwardCache)> {
    let trace = model.forward_batch(y, depth, Mode::default())?;
    let out = trace.output(model.matrix.n_tilde(), y.ncols());
    Ok((out, trace))
}

/// Gradient of `sum ||x_depth - target||^2 / norm` with respect to every front
/// end and every layer's parameters. Layers beyond the cache depth get zero
/// gradients.
pub fn backward(model: &LampModel, cache: &ForwardCache, target: ArrayView2<'_, f64>, norm: f64) -> Result<GradientSet> {
    let depth = cache.layers.len();
    if depth > model.depth() {
        return Err(Error::Shape("cache deeper than the model".into()));
    }
    let n_tilde = model.matrix.n_tilde();
    let l_tilde = model.matrix.l_tilde();
    let out = cache.output(n_tilde, target.ncols());
    if out.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "target is {:?}, prediction is {:?}",
            target.dim(),
            out.dim()
        )));
    }
    let layout = model.layout();
    let width = layout.width();
    let blocks = target.ncols() / width;
    let s_mat = model.matrix.matrix();
    let inv_l = 1.0 / l_tilde as f64;

    let mut grads = GradientSet {
        w: model.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
        layers: model.layers.iter().map(|p| vec![0.0; p.len()]).collect(),
        loss: loss(out.view(), target, norm),
    };
    let mut g_x = (&out - &target) * (2.0 / norm);
    let mut g_v = Array2::<f64>::zeros((l_tilde, target.ncols()));
    for i in (0..depth).rev() {
        let layer = &cache.layers[i];
        // v_i = y - S x_i + v_{i-1} O^T / L~
        g_x -= &s_mat.t().dot(&g_v);
        let mut g_vprev = Array2::<f64>::zeros(g_v.raw_dim());
        for (b, o) in layer.onsager.iter().enumerate() {
            let cols = s![.., b * width..(b + 1) * width];
            let mem = g_v.slice(cols).dot(o);
            Zip::from(g_vprev.slice_mut(cols))
                .and(&mem)
                .for_each(|a, &m| *a = inv_l * m);
        }
        // x_i = eta(r_i)
        let mut g_r = Array2::<f64>::zeros(layer.r.raw_dim());
        for b in 0..blocks {
            let cols = s![.., b * width..(b + 1) * width];
            let (gr, gp) = shrink_vjp(
                &model.layers[i],
                &layout,
                layer.r.slice(cols),
                layer.sigma[b],
                g_x.slice(cols),
            )?;
            g_r.slice_mut(cols).assign(&gr);
            for (acc, v) in grads.layers[i].iter_mut().zip(gp) {
                *acc += v;
            }
        }
        // r_i = x_{i-1} + W v_{i-1}
        let w = model.w_for(i);
        g_vprev += &w.t().dot(&g_r);
        let slot = if model.tied { 0 } else { i };
        grads.w[slot] += &g_r.dot(&layer.v_prev.t());
        g_x = g_r;
        g_v = g_vprev;
    }
    Ok(grads)
}

/// Loss of a perturbed model with noise levels and Onsager matrices taken from
/// `base`.
pub fn frozen_loss(
    model: &LampModel,
    y: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    base: &ForwardCache,
    norm: f64,
) -> Result<f64> {
    let trace = model.forward_batch(
        y,
        base.layers.len(),
        Mode {
            onsager: true,
            frozen: Some(base),
        },
    )?;
    Ok(loss(trace.output(model.matrix.n_tilde(), y.ncols()).view(), target, norm))
}

/// A single learnable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelector {
    /// Denoiser parameter `index` of `layer`.
    Theta { layer: usize, index: usize },
    /// Entry of stored front end `slot`.
    W { slot: usize, row: usize, col: usize },
}

fn get(model: &LampModel, p: ParamSelector) -> f64 {
    match p {
        ParamSelector::Theta { layer, index } => model.layers[layer].to_vec()[index],
        ParamSelector::W { slot, row, col } => model.w[slot][[row, col]],
    }
}

fn set(model: &mut LampModel, p: ParamSelector, v: f64) {
    match p {
        ParamSelector::Theta { layer, index } => {
            let mut vals = model.layers[layer].to_vec();
            vals[index] = v;
            model.layers[layer].set_from_slice(&vals);
        }
        ParamSelector::W { slot, row, col } => model.w[slot][[row, col]] = v,
    }
}

impl GradientSet {
    pub fn get(&self, p: ParamSelector) -> f64 {
        match p {
            ParamSelector::Theta { layer, index } => self.layers[layer][index],
            ParamSelector::W { slot, row, col } => self.w[slot][[row, col]],
        }
    }
}

/// Central differences `(L(p + eps) - L(p - eps)) / (2 eps)` of the frozen
/// loss, one entry per selector.
pub fn finite_diff_gradient(
    model: &LampModel,
    y: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    depth: usize,
    selectors: &[ParamSelector],
    eps: f64,
    norm: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {eps} must be positive")));
    }
    let (_, base) = forward_cached(model, y, depth)?;
    let mut work = model.clone();
    selectors
        .iter()
        .map(|&sel| {
            let p0 = get(model, sel);
            if p0 + eps == p0 || p0 - eps == p0 {
                return Err(Error::InvalidArgument(format!("step {eps} underflows at {p0}")));
            }
            set(&mut work, sel, p0 + eps);
            let up = frozen_loss(&work, y, target, &base, norm)?;
            set(&mut work, sel, p0 - eps);
            let down = frozen_loss(&work, y, target, &base, norm)?;
            set(&mut work, sel, p0);
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Structure;
    use crate::shrinkage::{DenoiserKind, ShrinkageParams};
    use crate::signal_model::{build_expanded_matrix, generate_dataset, generate_pilots, ExpandedPilotMatrix, Field, SystemConfig};
    use std::sync::Arc;

    fn small(field: Field, antennas: usize) -> (SystemConfig, Arc<ExpandedPilotMatrix>) {
        let cfg = SystemConfig {
            users: 20,
            pilot_len: 10,
            guard: 1,
            max_delay: 1,
            antennas,
            field,
            snr_db: 5.0,
            ..SystemConfig::desk()
        };
        let m = build_expanded_matrix(&generate_pilots(&cfg, 4), cfg.guard);
        (cfg, Arc::new(m))
    }

    #[test]
    fn zero_gradient_at_target() {
        let (cfg, m) = small(Field::Real, 1);
        let model = LampModel::init(m, Structure::Smv, 2, DenoiserKind::Mmse, &cfg, true).unwrap();
        let data = generate_dataset(&cfg, 1, "g").unwrap();
        let (out, cache) = forward_cached(&model, data.samples[0].y.view(), 2).unwrap();
        let g = backward(&model, &cache, out.view(), 1.0).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.w[0].iter().all(|&v| v == 0.0));
        assert!(g.layers.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_depth_one_matches_least_squares_gradient() {
        // eta(r) = -theta4 r, so x = -theta4 W y and
        // dL/dW = -2 theta4 (x - t) y^T, dL/dtheta4 = -2 <x - t, W y>.
        let (cfg, m) = small(Field::Real, 1);
        let mut model = LampModel::init(m.clone(), Structure::Smv, 1, DenoiserKind::Mmse, &cfg, true).unwrap();
        model.layers[0] = ShrinkageParams::Mmse {
            theta1: 1.0,
            theta2: 9.0,
            theta3: 0.0,
            theta4: -0.8,
        };
        let data = generate_dataset(&cfg, 1, "g").unwrap();
        let y = &data.samples[0].y;
        let t = data.samples[0].x0(cfg.guard);
        let (out, cache) = forward_cached(&model, y.view(), 1).unwrap();
        let wy = model.w[0].dot(y);
        assert!((&out - &(&wy * 0.8)).iter().all(|v| v.abs() < 1e-14));
        let g = backward(&model, &cache, t.view(), 1.0).unwrap();
        let resid = &out - &t;
        let gw = resid.dot(&y.t()) * 1.6;
        let gt4 = -2.0 * (&resid * &wy).sum();
        for (a, b) in g.w[0].iter().zip(gw.iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-3));
        }
        assert!((g.layers[0][3] - gt4).abs() <= 1e-10 * gt4.abs());
    }

    #[test]
    fn backward_matches_frozen_finite_differences() {
        for (field, antennas, structure) in [
            (Field::Real, 1, Structure::Smv),
            (Field::Complex, 2, Structure::Centralized),
            (Field::Complex, 2, Structure::Distributed),
        ] {
            let (cfg, m) = small(field, antennas);
            let data = generate_dataset(&cfg, 2, "g").unwrap();
            // Batch the two frames side by side.
            let y = ndarray::concatenate![ndarray::Axis(1), data.samples[0].y, data.samples[1].y];
            let t = ndarray::concatenate![
                ndarray::Axis(1),
                data.samples[0].x0(cfg.guard),
                data.samples[1].x0(cfg.guard)
            ];
            for kind in [DenoiserKind::SoftThreshold, DenoiserKind::Mmse] {
                for tied in [true, false] {
                    let mut model = LampModel::init(m.clone(), structure, 2, kind, &cfg, tied).unwrap();
                    for (k, w) in model.w.iter_mut().enumerate() {
                        w.mapv_inplace(|v| v * (1.0 + 0.05 * k as f64));
                    }
                    let (_, cache) = forward_cached(&model, y.view(), 2).unwrap();
                    let g = backward(&model, &cache, t.view(), 2.0).unwrap();
                    let mut sel = vec![];
                    for layer in 0..2 {
                        for index in 0..model.layers[layer].len() {
                            sel.push(ParamSelector::Theta { layer, index });
                        }
                    }
                    for k in 0..12 {
                        sel.push(ParamSelector::W {
                            slot: k % model.w.len(),
                            row: (7 * k + 3) % m.n_tilde(),
                            col: (5 * k + 1) % m.l_tilde(),
                        });
                    }
                    let fd = finite_diff_gradient(&model, y.view(), t.view(), 2, &sel, 1e-6, 2.0).unwrap();
                    for (s, f) in sel.iter().zip(fd) {
                        let a = g.get(*s);
                        assert!(
                            (a - f).abs() <= 1e-4 * f.abs().max(1e-6) + 1e-9,
                            "{field} {structure} {kind:?} tied={tied} {s:?}: {a} vs {f}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn descent_step_reduces_loss() {
        let (cfg, m) = small(Field::Complex, 1);
        let data = generate_dataset(&cfg, 40, "g").unwrap();
        let mut checked = 0;
        let mut model = LampModel::init(m, Structure::Smv, 3, DenoiserKind::Mmse, &cfg, true).unwrap();
        for s in &data.samples {
            let t = s.x0(cfg.guard);
            if t.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (_, cache) = forward_cached(&model, s.y.view(), 3).unwrap();
            let g = backward(&model, &cache, t.view(), 1.0).unwrap();
            let mut next = model.clone();
            let step = 1e-5;
            next.w[0].scaled_add(-step, &g.w[0]);
            for (p, gp) in next.layers.iter_mut().zip(&g.layers) {
                let v: Vec<f64> = p.to_vec().iter().zip(gp).map(|(a, b)| a - step * b).collect();
                p.set_from_slice(&v);
            }
            // The loss whose gradient the convention defines.
            let after = frozen_loss(&next, s.y.view(), t.view(), &cache, 1.0).unwrap();
            assert!(after < g.loss);
            model = next;
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn step_must_be_positive() {
        let (cfg, m) = small(Field::Real, 1);
        let model = LampModel::init(m, Structure::Smv, 1, DenoiserKind::Mmse, &cfg, true).unwrap();
        let y = Array2::zeros((model.matrix.l_tilde(), 1));
        let t = Array2::zeros((model.matrix.n_tilde(), 1));
        let sel = [ParamSelector::Theta { layer: 0, index: 1 }];
        assert!(finite_diff_gradient(&model, y.view(), t.view(), 1, &sel, 0.0, 1.0).is_err());
        assert!(finite_diff_gradient(&model, y.view(), t.view(), 1, &sel, 1e-300, 1.0).is_err());
    }
}
