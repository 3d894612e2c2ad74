//! The iteration shared by AMP and every LAMP structure.
//!
//! Signals are batches of column blocks: a block is one measurement problem
//! with `layout.width()` real columns, and a batch concatenates blocks
//! horizontally. Each block carries its own noise estimate and Onsager
//! matrix.

use ndarray::{s, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::shrinkage::{shrink, RowLayout, ShrinkageParams};

/// Lower bound applied to estimated noise levels inside the iterations.
pub const SIGMA_FLOOR: f64 = 1e-30;

/// One layer: linear front end `W` (`N~ x L~`) and denoiser parameters.
#[derive(Debug, Clone, Copy)]
pub struct Stage<'a> {
    pub w: ArrayView2<'a, f64>,
    pub params: &'a ShrinkageParams,
}

/// Values retained from one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Residual entering the layer, `v_{i-1}`.
    pub v_prev: Array2<f64>,
    /// Per-block noise level used by the denoiser.
    pub sigma: Vec<f64>,
    pub r: Array2<f64>,
    pub xhat: Array2<f64>,
    /// Per-block Onsager matrices applied to `v_prev`.
    pub onsager: Vec<Array2<f64>>,
    /// Residual leaving the layer, `v_i`.
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerCache>,
}

impl ForwardTrace {
    /// Final estimate, or zeros of the given shape for an empty network.
    pub fn output(&self, rows: usize, cols: usize) -> Array2<f64> {
        self.layers
            .last()
            .map(|l| l.xhat.clone())
            .unwrap_or_else(|| Array2::zeros((rows, cols)))
    }
}

/// Options of the iteration.
#[derive(Debug, Clone, Copy)]
pub struct Mode<'a> {
    /// Include the Onsager memory term.
    pub onsager: bool,
    /// Reuse noise levels and Onsager matrices from an earlier pass.
    pub frozen: Option<&'a ForwardTrace>,
}

impl Default for Mode<'_> {
    fn default() -> Self {
        Mode {
            onsager: true,
            frozen: None,
        }
    }
}

pub(crate) fn block_count(cols: usize, layout: &RowLayout) -> Result<usize> {
    let w = layout.width();
    if w == 0 || cols % w != 0 {
        return Err(Error::Shape(format!("{cols} columns do not split into blocks of {w}")));
    }
    Ok(cols / w)
}

/// Per-block `||v_b||_F / sqrt(L~ M)`, floored.
pub fn block_sigma(v: ArrayView2<'_, f64>, layout: &RowLayout) -> Vec<f64> {
    let w = layout.width();
    let denom = (v.nrows() * layout.antennas) as f64;
    (0..v.ncols() / w)
        .map(|b| {
            let blk = v.slice(s![.., b * w..(b + 1) * w]);
            (blk.iter().map(|x| x * x).sum::<f64>() / denom).sqrt().max(SIGMA_FLOOR)
        })
        .collect()
}

/// Runs `stages` on the batch `y` (`L~ x blocks*width`) with measurement
/// matrix `s_mat` (`L~ x N~`).
pub fn forward(
    s_mat: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    layout: &RowLayout,
    stages: &[Stage<'_>],
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    let (l_tilde, n_tilde) = s_mat.dim();
    if y.nrows() != l_tilde {
        return Err(Error::Shape(format!(
            "signal has {} rows, matrix has {l_tilde}",
            y.nrows()
        )));
    }
    let blocks = block_count(y.ncols(), layout)?;
    if n_tilde % layout.group_len != 0 {
        return Err(Error::Shape("matrix columns do not split into user groups".into()));
    }
    for st in stages {
        if st.w.dim() != (n_tilde, l_tilde) {
            return Err(Error::Shape(format!(
                "front end is {:?}, expected {:?}",
                st.w.dim(),
                (n_tilde, l_tilde)
            )));
        }
    }
    if let Some(f) = mode.frozen {
        if f.layers.len() != stages.len() {
            return Err(Error::Shape("frozen trace depth differs from network depth".into()));
        }
    }
    let width = layout.width();
    let inv_l = 1.0 / l_tilde as f64;
    let mut xhat = Array2::<f64>::zeros((n_tilde, y.ncols()));
    let mut v_prev = y.to_owned();
    let mut layers = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate() {
        let frozen = mode.frozen.map(|f| &f.layers[i]);
        let sigma = match frozen {
            Some(f) => f.sigma.clone(),
            None => block_sigma(v_prev.view(), layout),
        };
        let mut r = st.w.dot(&v_prev);
        r += &xhat;
        let mut next = Array2::<f64>::zeros(r.raw_dim());
        let mut onsager = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let cols = s![.., b * width..(b + 1) * width];
            let eval = shrink(st.params, layout, r.slice(cols), sigma[b])?;
            next.slice_mut(cols).assign(&eval.output);
            onsager.push(match frozen {
                Some(f) => f.onsager[b].clone(),
                None if mode.onsager => eval.onsager,
                None => Array2::zeros((width, width)),
            });
        }
        if let Some(idx) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: format!("layer {}", i + 1),
                index: idx,
            });
        }
        xhat = next;
        let mut v = y.to_owned() - s_mat.dot(&xhat);
        for (b, o) in onsager.iter().enumerate() {
            let cols = s![.., b * width..(b + 1) * width];
            let mem = v_prev.slice(cols).dot(&o.t());
            Zip::from(v.slice_mut(cols))
                .and(&mem)
                .for_each(|a, &m| *a += inv_l * m);
        }
        layers.push(LayerCache {
            v_prev: std::mem::replace(&mut v_prev, v.clone()),
            sigma,
            r,
            xhat: xhat.clone(),
            onsager,
            v,
        });
    }
    Ok(ForwardTrace { layers })
}
