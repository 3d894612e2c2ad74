//! On-disk container: a directory holding `manifest.json` plus raw
//! little-endian, row-major arrays, one file per array.
//!
//! Dataset layout (`kind = "dataset"`), with `c` = 1 (real) or 2 (complex,
//! real/imaginary interleaved):
//!
//! | array     | dtype | shape               |
//! |-----------|-------|---------------------|
//! | `pilots`  | f64   | `[N, L]`            |
//! | `y`       | f32   | `[count, L~, M, c]` |
//! | `active`  | u8    | `[count, N]`        |
//! | `delay`   | u32   | `[count, N]` (0 where inactive) |
//! | `channel` | f32   | `[count, N, M, c]` (0 where inactive) |
//!
//! The effective channel is not stored; it follows from `active`, `delay`
//! and `channel`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_model::{
    build_expanded_matrix, Dataset, GroundTruth, PilotSet, Sample, SystemConfig,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
    U32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Writes arrays into a directory and records them for the manifest.
pub struct ArrayWriter {
    dir: PathBuf,
    arrays: Vec<ArrayInfo>,
}

impl ArrayWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ArrayWriter {
            dir: dir.to_path_buf(),
            arrays: Vec::new(),
        })
    }

    fn write_raw(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<()> {
        let file = format!("{name}.bin");
        let path = self.dir.join(&file);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.arrays.push(ArrayInfo {
            name: name.to_string(),
            file,
            dtype,
            shape: shape.to_vec(),
        });
        Ok(())
    }

    pub fn f64s(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<()> {
        let bytes: Vec<u8> = data.into_iter().flat_map(f64::to_le_bytes).collect();
        self.write_raw(name, Dtype::F64, shape, &bytes)
    }

    pub fn f32s(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<()> {
        let bytes: Vec<u8> = data
            .into_iter()
            .flat_map(|v| (v as f32).to_le_bytes())
            .collect();
        self.write_raw(name, Dtype::F32, shape, &bytes)
    }

    pub fn u8s(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = u8>) -> Result<()> {
        let bytes: Vec<u8> = data.into_iter().collect();
        self.write_raw(name, Dtype::U8, shape, &bytes)
    }

    pub fn u32s(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = u32>) -> Result<()> {
        let bytes: Vec<u8> = data.into_iter().flat_map(u32::to_le_bytes).collect();
        self.write_raw(name, Dtype::U32, shape, &bytes)
    }

    /// Serializes `manifest` (which must carry the recorded arrays) as the
    /// directory manifest.
    pub fn finish<M: Serialize>(self, manifest: &M) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(manifest)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn arrays(&self) -> Vec<ArrayInfo> {
        self.arrays.clone()
    }
}

pub fn read_manifest<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<M> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads the arrays listed in a manifest.
pub struct ArrayReader<'a> {
    dir: PathBuf,
    arrays: &'a [ArrayInfo],
}

impl<'a> ArrayReader<'a> {
    pub fn new(dir: &Path, arrays: &'a [ArrayInfo]) -> Self {
        ArrayReader {
            dir: dir.to_path_buf(),
            arrays,
        }
    }

    fn raw(&self, name: &str, dtype: Dtype) -> Result<(Vec<u8>, Vec<usize>)> {
        let info = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format(self.dir.join(MANIFEST), format!("missing array `{name}`")))?;
        let path = self.dir.join(&info.file);
        if info.dtype != dtype {
            return Err(Error::format(&path, format!("expected {dtype:?}, manifest says {:?}", info.dtype)));
        }
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&path, e))?;
        let expected: usize = info.shape.iter().product::<usize>() * dtype.size();
        if bytes.len() != expected {
            return Err(Error::format(
                &path,
                format!("{} bytes, shape {:?} needs {expected}", bytes.len(), info.shape),
            ));
        }
        Ok((bytes, info.shape.clone()))
    }

    pub fn f64s(&self, name: &str) -> Result<(Vec<f64>, Vec<usize>)> {
        let (b, shape) = self.raw(name, Dtype::F64)?;
        let v = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((v, shape))
    }

    pub fn f32s(&self, name: &str) -> Result<(Vec<f64>, Vec<usize>)> {
        let (b, shape) = self.raw(name, Dtype::F32)?;
        let v = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((v, shape))
    }

    pub fn u8s(&self, name: &str) -> Result<(Vec<u8>, Vec<usize>)> {
        self.raw(name, Dtype::U8)
    }

    pub fn u32s(&self, name: &str) -> Result<(Vec<u32>, Vec<usize>)> {
        let (b, shape) = self.raw(name, Dtype::U32)?;
        let v = b
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((v, shape))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub users: usize,
    pub pilot_len: usize,
    pub guard: usize,
    pub l_tilde: usize,
    pub n_tilde: usize,
    pub antennas: usize,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub base_seed: u64,
    pub pilot_seed: u64,
    pub split: String,
    /// First and one-past-last sample index.
    pub index_range: (u64, u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: String,
    pub split: String,
    pub count: usize,
    pub field: crate::signal_model::Field,
    pub config: SystemConfig,
    pub dims: DatasetDims,
    pub lineage: SeedLineage,
    #[serde(default)]
    pub spec_hash: Option<String>,
    pub arrays: Vec<ArrayInfo>,
}

impl Dataset {
    pub fn save(&self, dir: &Path, spec_hash: Option<&str>) -> Result<()> {
        let cfg = &self.config;
        let (n, l, lt, m, c) = (
            cfg.users,
            cfg.pilot_len,
            cfg.l_tilde(),
            cfg.antennas,
            cfg.field.components(),
        );
        let count = self.samples.len();
        let mut w = ArrayWriter::create(dir)?;
        w.f64s("pilots", &[n, l], self.pilots.columns().t().iter().copied())?;
        w.f32s(
            "y",
            &[count, lt, m, c],
            self.samples.iter().flat_map(|s| s.y.iter().copied()),
        )?;
        w.u8s(
            "active",
            &[count, n],
            self.samples.iter().flat_map(|s| s.truth.active.iter().map(|&a| a as u8)),
        )?;
        w.u32s(
            "delay",
            &[count, n],
            self.samples
                .iter()
                .flat_map(|s| s.truth.delay.iter().map(|d| d.unwrap_or(0) as u32)),
        )?;
        w.f32s(
            "channel",
            &[count, n, m, c],
            self.samples.iter().flat_map(|s| s.truth.channels.iter().copied()),
        )?;
        let first = self.samples.first().map_or(0, |s| s.index);
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            kind: "dataset".into(),
            split: self.split.clone(),
            count,
            field: cfg.field,
            config: cfg.clone(),
            dims: DatasetDims {
                users: n,
                pilot_len: l,
                guard: cfg.guard,
                l_tilde: lt,
                n_tilde: cfg.n_tilde(),
                antennas: m,
                components: c,
            },
            lineage: SeedLineage {
                base_seed: cfg.base_seed,
                pilot_seed: cfg.base_seed,
                split: self.split.clone(),
                index_range: (first, first + count as u64),
            },
            spec_hash: spec_hash.map(str::to_string),
            arrays: w.arrays(),
        };
        w.finish(&manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = read_manifest(dir)?;
        let mpath = dir.join(MANIFEST);
        if manifest.kind != "dataset" {
            return Err(Error::format(&mpath, format!("kind `{}` is not a dataset", manifest.kind)));
        }
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
        }
        let cfg = manifest.config.clone();
        cfg.validate()?;
        let (n, l, lt, width) = (cfg.users, cfg.pilot_len, cfg.l_tilde(), cfg.width());
        let count = manifest.count;
        let r = ArrayReader::new(dir, &manifest.arrays);
        let check = |name: &str, got: &[usize], want: &[usize]| {
            if got != want {
                Err(Error::format(dir.join(MANIFEST), format!("array `{name}` has shape {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        let (pilots, shape) = r.f64s("pilots")?;
        check("pilots", &shape, &[n, l])?;
        let (y, shape) = r.f32s("y")?;
        check("y", &shape, &[count, lt, cfg.antennas, cfg.field.components()])?;
        let (active, shape) = r.u8s("active")?;
        check("active", &shape, &[count, n])?;
        let (delay, shape) = r.u32s("delay")?;
        check("delay", &shape, &[count, n])?;
        let (channel, shape) = r.f32s("channel")?;
        check("channel", &shape, &[count, n, cfg.antennas, cfg.field.components()])?;

        let pilots = PilotSet::from_columns(
            Array2::from_shape_vec((n, l), pilots)
                .expect("shape checked")
                .reversed_axes()
                .as_standard_layout()
                .to_owned(),
        )?;
        let matrix = build_expanded_matrix(&pilots, cfg.guard);
        let first = manifest.lineage.index_range.0;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let y = Array2::from_shape_vec((lt, width), y[i * lt * width..(i + 1) * lt * width].to_vec())
                .expect("shape checked");
            let act: Vec<bool> = active[i * n..(i + 1) * n].iter().map(|&a| a != 0).collect();
            let del: Vec<Option<usize>> = act
                .iter()
                .zip(&delay[i * n..(i + 1) * n])
                .map(|(&a, &d)| a.then_some(d as usize))
                .collect();
            if del.iter().flatten().any(|&d| d > cfg.guard) {
                return Err(Error::format(dir.join("delay.bin"), "delay exceeds guard"));
            }
            let channels = Array2::from_shape_vec(
                (n, width),
                channel[i * n * width..(i + 1) * n * width].to_vec(),
            )
            .expect("shape checked");
            samples.push(Sample {
                index: first + i as u64,
                y,
                truth: GroundTruth {
                    active: act,
                    delay: del,
                    phi: vec![cfg.phi; n],
                    channels,
                },
            });
        }
        Ok(Dataset {
            config: cfg,
            split: manifest.split,
            pilots: Arc::new(pilots),
            matrix: Arc::new(matrix),
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::{generate_dataset, Field};

    #[test]
    fn dataset_round_trip_is_bitwise() {
        for (field, antennas, count) in [(Field::Complex, 2, 3), (Field::Real, 1, 1)] {
            let cfg = SystemConfig {
                users: 10,
                pilot_len: 5,
                guard: 2,
                max_delay: 2,
                p_active: 0.4,
                antennas,
                snr_db: 4.0,
                phi: 1.0,
                field,
                base_seed: 3,
            };
            let ds = generate_dataset(&cfg, count, "train").unwrap();
            let dir = tempfile::tempdir().unwrap();
            ds.save(dir.path(), Some("abc")).unwrap();
            let back = Dataset::load(dir.path()).unwrap();
            assert_eq!(back.samples, ds.samples);
            assert_eq!(back.matrix, ds.matrix);
            assert_eq!(back.config, ds.config);
            let m: DatasetManifest = read_manifest(dir.path()).unwrap();
            assert_eq!(m.spec_hash.as_deref(), Some("abc"));
            assert_eq!(m.arrays.iter().find(|a| a.name == "y").unwrap().shape, vec![count, 7, antennas, field.components()]);
        }
    }

    #[test]
    fn truncated_file_is_reported_with_path() {
        let cfg = SystemConfig::desk();
        let ds = generate_dataset(&cfg, 2, "train").unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), None).unwrap();
        let y = dir.path().join("y.bin");
        let bytes = fs::read(&y).unwrap();
        fs::write(&y, &bytes[..bytes.len() - 4]).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, y),
            other => panic!("unexpected {other:?}"),
        }
        let missing = Dataset::load(&dir.path().join("nope"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }
}
