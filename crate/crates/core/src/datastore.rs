//! Sample files, dataset manifests, and dataset generation.
//!
//! A TESF file is little-endian: `"TESF"`, version `u32 = 1`, `nx u32`,
//! `ny u32`, `n_fields u32 = 6`, then for each field `name_len u8` and the
//! ASCII name (`T ux uy sxx syy sxy`), then the six row-major `f64` arrays
//! in the same order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{build_grid, BoardGeometry, GridSpec, MaterialParams};
use crate::grf::{GrfConfig, GrfSampler};
use crate::residual::{PhysicsResidual, ResidualScales};
use crate::solver::{FieldSample, Problem, FIELD_NAMES};
use crate::stencils::ScalarField;
use crate::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"TESF";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

/// Decoded TESF payload before it is attached to a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub nx: usize,
    pub ny: usize,
    pub fields: [Vec<f64>; 6],
}

impl SampleFile {
    pub fn from_sample(sample: &FieldSample) -> Self {
        let g = sample.grid();
        Self {
            nx: g.nx,
            ny: g.ny,
            fields: sample.fields().map(|f| f.values().to_vec()),
        }
    }

    pub fn into_sample(self, grid: &GridSpec) -> Result<FieldSample> {
        if (self.nx, self.ny) != (grid.nx, grid.ny) {
            return Err(Error::Shape(format!(
                "sample is {} x {}, grid is {} x {}",
                self.nx, self.ny, grid.nx, grid.ny
            )));
        }
        let [a, b, c, d, e, f] = self.fields;
        let mk = |v| ScalarField::new(*grid, v);
        FieldSample::from_fields([mk(a)?, mk(b)?, mk(c)?, mk(d)?, mk(e)?, mk(f)?])
    }

    pub fn encode(&self) -> Vec<u8> {
        let names_len: usize = FIELD_NAMES.iter().map(|n| 1 + n.len()).sum();
        let mut out = Vec::with_capacity(20 + names_len + 6 * 8 * self.nx * self.ny);
        out.extend_from_slice(SAMPLE_MAGIC);
        out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.nx as u32).to_le_bytes());
        out.extend_from_slice(&(self.ny as u32).to_le_bytes());
        out.extend_from_slice(&(FIELD_NAMES.len() as u32).to_le_bytes());
        for name in FIELD_NAMES {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
        }
        for field in &self.fields {
            for v in field {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, origin };
        let magic = cur.take(4)?;
        if magic != SAMPLE_MAGIC {
            return Err(Error::BadMagic(origin.to_string()));
        }
        let version = cur.u32()?;
        if version != SAMPLE_VERSION {
            return Err(Error::BadVersion {
                found: version,
                expected: SAMPLE_VERSION,
            });
        }
        let nx = cur.u32()? as usize;
        let ny = cur.u32()? as usize;
        let n_fields = cur.u32()? as usize;
        if n_fields != FIELD_NAMES.len() {
            return Err(Error::Malformed(format!("{origin}: expected 6 fields, found {n_fields}")));
        }
        for expected in FIELD_NAMES {
            let len = cur.take(1)?[0] as usize;
            let name = cur.take(len)?;
            if name != expected.as_bytes() {
                return Err(Error::Malformed(format!(
                    "{origin}: expected field {expected}, found {}",
                    String::from_utf8_lossy(name)
                )));
            }
        }
        let n = nx
            .checked_mul(ny)
            .ok_or_else(|| Error::Malformed(format!("{origin}: grid size overflows")))?;
        let mut fields: [Vec<f64>; 6] = Default::default();
        for field in fields.iter_mut() {
            let raw = cur.take(8 * n)?;
            *field = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        if cur.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{origin}: {} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { nx, ny, fields })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{}: needed {n} bytes at offset {}",
                self.origin, self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_sample(path: &Path, sample: &FieldSample) -> Result<()> {
    write_atomic(path, &SampleFile::from_sample(sample).encode())
}

pub fn read_sample_file(path: &Path) -> Result<SampleFile> {
    let bytes = fs::read(path)?;
    SampleFile::decode(&bytes, &path.display().to_string())
}

pub fn read_sample(path: &Path, grid: &GridSpec) -> Result<FieldSample> {
    read_sample_file(path)?.into_sample(grid)
}

/// Per-field normalization statistics as stored in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub board: BoardGeometry,
    pub material: MaterialParams,
    pub grid: GridSpec,
    pub grf: GrfConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<Vec<FieldStat>>,
    pub splits: Splits,
    pub master_seed: u64,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_json()?.as_bytes())
    }

    /// Loads and checks the manifest in `dir`: splits must be disjoint and
    /// every listed file must exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::BadVersion {
                found: m.schema_version,
                expected: MANIFEST_SCHEMA,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for name in m.splits.all() {
            if !seen.insert(name.as_str()) {
                return Err(Error::Manifest(format!("{name} is listed twice")));
            }
            if !dir.join(name).is_file() {
                return Err(Error::Manifest(format!("{name} is listed but missing")));
            }
        }
        Ok(m)
    }

    pub fn classes(&self) -> Result<crate::geometry::NodeClassField> {
        let (grid, classes) = build_grid(&self.board, self.grid.nx, self.grid.ny)?;
        if grid != self.grid {
            return Err(Error::Manifest("stored grid disagrees with board".into()));
        }
        Ok(classes)
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(self.classes()?, self.material)
    }

    pub fn read(&self, dir: &Path, names: &[String]) -> Result<Vec<FieldSample>> {
        names.iter().map(|n| read_sample(&dir.join(n), &self.grid)).collect()
    }
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub board: BoardGeometry,
    pub material: MaterialParams,
    pub nx: usize,
    pub ny: usize,
    pub grf: GrfConfig,
    pub master_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.tesf")
}

/// Generates `n_train + n_val + n_test` samples into `out_dir`. Sample `i`
/// uses GRF seed `master_seed + i`; the output does not depend on the
/// number of worker threads.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.material.validate()?;
    let (grid, classes) = build_grid(&cfg.board, cfg.nx, cfg.ny)?;
    let problem = Problem::new(classes, cfg.material)?;
    let sampler = GrfSampler::new(grid, cfg.grf)?;
    fs::create_dir_all(out_dir)?;
    let n = cfg.n_train + cfg.n_val + cfg.n_test;

    let outcomes: Vec<(usize, Result<()>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<()> {
                let t = sampler.sample(cfg.master_seed.wrapping_add(i as u64));
                let sample = problem.generate_sample(&t)?;
                write_sample(&out_dir.join(sample_file_name(i)), &sample)
            };
            (i, run())
        })
        .collect();
    let failures: Vec<String> = outcomes
        .iter()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| format!("sample {i}: {e}")))
        .collect();
    if !failures.is_empty() {
        return Err(Error::Manifest(format!(
            "{} sample(s) failed: {}",
            failures.len(),
            failures.join("; ")
        )));
    }

    let names: Vec<String> = (0..n).map(sample_file_name).collect();
    let splits = Splits {
        train: names[..cfg.n_train].to_vec(),
        val: names[cfg.n_train..cfg.n_train + cfg.n_val].to_vec(),
        test: names[cfg.n_train + cfg.n_val..].to_vec(),
    };
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        board: cfg.board.clone(),
        material: cfg.material,
        grid,
        grf: cfg.grf,
        norm_stats: None,
        splits,
        master_seed: cfg.master_seed,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Scaled physics loss of every sample in the manifest, with the residual
/// scales set by the largest temperature magnitude in the dataset.
pub fn audit_dataset(dir: &Path) -> Result<Vec<(String, f64)>> {
    let manifest = Manifest::load(dir)?;
    let problem = manifest.problem()?;
    let names: Vec<String> = manifest.splits.all().cloned().collect();
    let samples = manifest.read(dir, &names)?;
    let t_char = samples
        .iter()
        .map(|s| s.t.max_abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let scales = ResidualScales::from_temperature(&manifest.material, t_char, manifest.grid.h);
    let residual = PhysicsResidual::new(&problem);
    Ok(names
        .into_iter()
        .zip(&samples)
        .map(|(n, s)| (n, residual.loss(s, &scales)))
        .collect())
}

/// Path of the manifest inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
