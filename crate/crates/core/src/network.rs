//! LAMP models: AMP unfolded into a fixed number of layers with a learnable
//! front end `W` and learnable denoiser parameters.
//!
//! Multi-antenna structures differ only in how the antennas of a frame are
//! split into blocks that share one network:
//!
//! | structure       | antennas per block |
//! |-----------------|--------------------|
//! | `Smv`           | 1 (and `M = 1`)    |
//! | `Distributed`   | 1                  |
//! | `Centralized`   | `M`                |
//! | `Hybrid { U }`  | `M / U`            |

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{read_manifest, ArrayInfo, ArrayReader, ArrayWriter, FORMAT_VERSION, MANIFEST};
use crate::shrinkage::{DenoiserKind, RowLayout, ShrinkageParams};
use crate::signal_model::{ExpandedPilotMatrix, Field, SystemConfig};
use crate::unfold::{self, ForwardTrace, Mode, Stage};

const FRAME_CHUNK: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Structure {
    Smv,
    Distributed,
    Centralized,
    Hybrid { groups: usize },
}

impl Structure {
    /// Antennas handled jointly by one subnetwork.
    pub fn block_antennas(&self, antennas: usize) -> Result<usize> {
        match *self {
            Structure::Smv if antennas == 1 => Ok(1),
            Structure::Smv => Err(Error::Config(format!(
                "single-antenna structure with {antennas} antennas"
            ))),
            Structure::Distributed => Ok(1),
            Structure::Centralized => Ok(antennas),
            Structure::Hybrid { groups } if groups >= 1 && antennas % groups == 0 => Ok(antennas / groups),
            Structure::Hybrid { groups } => Err(Error::Config(format!(
                "{antennas} antennas do not split into {groups} equal subsets"
            ))),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Structure::Smv => write!(f, "smv"),
            Structure::Distributed => write!(f, "d"),
            Structure::Centralized => write!(f, "c"),
            Structure::Hybrid { groups } => write!(f, "h{groups}"),
        }
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smv" => Ok(Structure::Smv),
            "d" => Ok(Structure::Distributed),
            "c" => Ok(Structure::Centralized),
            _ => s
                .strip_prefix('h')
                .and_then(|u| u.parse().ok())
                .map(|groups| Structure::Hybrid { groups })
                .ok_or_else(|| Error::Config(format!("unknown structure `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LampModel {
    pub structure: Structure,
    pub denoiser: DenoiserKind,
    pub field: Field,
    /// Antennas of the system the model serves.
    pub antennas: usize,
    pub tied: bool,
    /// Measurement matrix used by the residual update.
    pub matrix: Arc<ExpandedPilotMatrix>,
    /// Front ends, `N~ x L~`; one when tied, one per layer otherwise.
    pub w: Vec<Array2<f64>>,
    pub layers: Vec<ShrinkageParams>,
    /// Free-form provenance (training schedule, datasets, seeds).
    pub lineage: BTreeMap<String, String>,
}

impl LampModel {
    /// Untrained model: `W = S~^T` and default denoiser parameters, which
    /// makes the forward pass coincide with AMP.
    pub fn init(
        matrix: Arc<ExpandedPilotMatrix>,
        structure: Structure,
        depth: usize,
        denoiser: DenoiserKind,
        config: &SystemConfig,
        tied: bool,
    ) -> Result<Self> {
        structure.block_antennas(config.antennas)?;
        if matrix.guard() != config.guard || matrix.users() != config.users {
            return Err(Error::Config("pilot matrix does not match the configuration".into()));
        }
        let w0 = matrix.matrix().t().to_owned();
        let w = if tied { vec![w0] } else { vec![w0; depth] };
        Ok(LampModel {
            structure,
            denoiser,
            field: config.field,
            antennas: config.antennas,
            tied,
            matrix,
            w,
            layers: vec![ShrinkageParams::default_for(denoiser, config); depth],
            lineage: BTreeMap::new(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn block_antennas(&self) -> usize {
        self.structure
            .block_antennas(self.antennas)
            .expect("validated at construction")
    }

    /// Row layout of one block.
    pub fn layout(&self) -> RowLayout {
        RowLayout::new(self.field, self.block_antennas(), self.matrix.group_len())
    }

    pub fn w_for(&self, layer: usize) -> ArrayView2<'_, f64> {
        if self.tied {
            self.w[0].view()
        } else {
            self.w[layer].view()
        }
    }

    /// The first `depth` layers as iteration stages.
    pub fn stages(&self, depth: usize) -> Vec<Stage<'_>> {
        (0..depth)
            .map(|i| Stage {
                w: self.w_for(i),
                params: &self.layers[i],
            })
            .collect()
    }

    /// Runs the first `depth` layers on a batch of blocks.
    pub fn forward_batch(&self, y: ArrayView2<'_, f64>, depth: usize, mode: Mode<'_>) -> Result<ForwardTrace> {
        unfold::forward(self.matrix.matrix().view(), y, &self.layout(), &self.stages(depth), mode)
    }

    /// Full-depth estimate for one frame `y` (`L~ x M components`). Blocks are
    /// processed one after another, so the result for each block is identical
    /// to running that block alone.
    pub fn forward(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let width_all = self.antennas * self.field.components();
        if y.ncols() != width_all || y.nrows() != self.matrix.l_tilde() {
            return Err(Error::Shape(format!(
                "frame is {:?}, model expects {:?}",
                y.dim(),
                (self.matrix.l_tilde(), width_all)
            )));
        }
        let w = self.layout().width();
        let mut out = Array2::zeros((self.matrix.n_tilde(), width_all));
        for b in 0..width_all / w {
            let cols = s![.., b * w..(b + 1) * w];
            let trace = self.forward_batch(y.slice(cols), self.depth(), Mode::default())?;
            out.slice_mut(cols).assign(&trace.output(self.matrix.n_tilde(), w));
        }
        Ok(out)
    }

    /// Full-depth estimates for many frames, evaluated in batches. Each entry
    /// is `N~ x M components`.
    pub fn forward_frames(&self, frames: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        let width_all = self.antennas * self.field.components();
        let lt = self.matrix.l_tilde();
        let nt = self.matrix.n_tilde();
        if let Some(f) = frames.iter().find(|f| f.dim() != (lt, width_all)) {
            return Err(Error::Shape(format!(
                "frame is {:?}, model expects {:?}",
                f.dim(),
                (lt, width_all)
            )));
        }
        let chunks: Vec<&[ArrayView2<'_, f64>]> = frames.chunks(FRAME_CHUNK).collect();
        let parts = chunks
            .par_iter()
            .map(|chunk| {
                let mut y = Array2::zeros((lt, chunk.len() * width_all));
                for (k, f) in chunk.iter().enumerate() {
                    y.slice_mut(s![.., k * width_all..(k + 1) * width_all]).assign(f);
                }
                let out = self
                    .forward_batch(y.view(), self.depth(), Mode::default())?
                    .output(nt, y.ncols());
                Ok((0..chunk.len())
                    .map(|k| out.slice(s![.., k * width_all..(k + 1) * width_all]).to_owned())
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn expect(&self, wanted: &[Structure]) -> Result<()> {
        let ok = wanted.iter().any(|w| {
            std::mem::discriminant(w) == std::mem::discriminant(&self.structure)
        });
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("operation not defined for structure {}", self.structure)))
        }
    }

    pub fn forward_smv(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.expect(&[Structure::Smv, Structure::Distributed])?;
        if y.ncols() != self.field.components() {
            return Err(Error::Shape("single-antenna frame expected".into()));
        }
        let w = self.field.components();
        let trace = self.forward_batch(y, self.depth(), Mode::default())?;
        Ok(trace.output(self.matrix.n_tilde(), w))
    }

    pub fn forward_d(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.expect(&[Structure::Distributed, Structure::Smv])?;
        self.forward(y)
    }

    pub fn forward_c(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.expect(&[Structure::Centralized])?;
        self.forward(y)
    }

    pub fn forward_h(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.expect(&[Structure::Hybrid { groups: 1 }])?;
        self.forward(y)
    }

    pub fn save(&self, dir: &Path, spec_hash: Option<&str>) -> Result<()> {
        let (lt, nt) = self.matrix.matrix().dim();
        let mut wr = ArrayWriter::create(dir)?;
        wr.f64s("w", &[self.w.len(), nt, lt], self.w.iter().flat_map(|w| w.iter().copied()))?;
        wr.f64s("matrix", &[lt, nt], self.matrix.matrix().iter().copied())?;
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            kind: "model".into(),
            structure: self.structure,
            denoiser: self.denoiser,
            field: self.field,
            antennas: self.antennas,
            guard: self.matrix.guard(),
            users: self.matrix.users(),
            depth: self.depth(),
            tied: self.tied,
            layers: self.layers.clone(),
            lineage: self.lineage.clone(),
            spec_hash: spec_hash.map(str::to_string),
            arrays: wr.arrays(),
        };
        wr.finish(&manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ModelManifest = read_manifest(dir)?;
        let mpath = dir.join(MANIFEST);
        if m.kind != "model" {
            return Err(Error::format(&mpath, format!("kind `{}` is not a model", m.kind)));
        }
        if m.format_version != FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported format version {}", m.format_version)));
        }
        m.structure
            .block_antennas(m.antennas)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        let r = ArrayReader::new(dir, &m.arrays);
        let (mat, shape) = r.f64s("matrix")?;
        if shape.len() != 2 || shape[1] != m.users * (m.guard + 1) {
            return Err(Error::format(&mpath, format!("matrix shape {shape:?} does not match the model")));
        }
        let matrix = Array2::from_shape_vec((shape[0], shape[1]), mat)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        let matrix = ExpandedPilotMatrix::from_matrix(matrix, m.guard)?;
        let (w, shape) = r.f64s("w")?;
        let count = if m.tied { 1 } else { m.depth };
        if shape != [count, matrix.n_tilde(), matrix.l_tilde()] {
            return Err(Error::format(&mpath, format!("w shape {shape:?} does not match the model")));
        }
        let w = Array3::from_shape_vec((shape[0], shape[1], shape[2]), w)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        for p in &m.layers {
            p.validate()?;
            if p.kind() != m.denoiser {
                return Err(Error::format(&mpath, "layer parameters disagree with the denoiser kind"));
            }
        }
        Ok(LampModel {
            structure: m.structure,
            denoiser: m.denoiser,
            field: m.field,
            antennas: m.antennas,
            tied: m.tied,
            matrix: Arc::new(matrix),
            w: w.outer_iter().map(|a| a.to_owned()).collect(),
            layers: m.layers,
            lineage: m.lineage,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub kind: String,
    pub structure: Structure,
    pub denoiser: DenoiserKind,
    pub field: Field,
    pub antennas: usize,
    pub guard: usize,
    pub users: usize,
    pub depth: usize,
    pub tied: bool,
    pub layers: Vec<ShrinkageParams>,
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
    #[serde(default)]
    pub spec_hash: Option<String>,
    pub arrays: Vec<ArrayInfo>,
}
