//! Trained-surrogate checkpoints.
//!
//! Layout (little-endian): `"MTAW"`, version `u32 = 1`, a config block
//! (`u32` byte length, then JSON), then named tensors until end of file,
//! each as `name_len u8`, the name, `rank u32`, `rank` dims as `u32`, and
//! the `f64` data. Parameters are named `net{i}.{param}`; normalization
//! running statistics `net{i}.{layer}.running_mean` / `.running_var`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thermo_core::datastore::write_atomic;

use crate::model::{ModelConfig, RunningNorm, UNet};
use crate::tensor::Tensor;
use crate::training::{ModelKind, NormStats, Surrogate};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTAW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    nets: Vec<NetHeader>,
    stats: NormStats,
    t_char: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    config: ModelConfig,
    groups: Vec<Vec<usize>>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let len = u8::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    out.push(len);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(model: &Surrogate) -> Result<Vec<u8>> {
    let header = Header {
        kind: model.kind,
        nets: model
            .nets
            .iter()
            .map(|n| NetHeader {
                config: *n.config(),
                groups: n.groups().to_vec(),
            })
            .collect(),
        stats: model.stats,
        t_char: model.t_char,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (i, net) in model.nets.iter().enumerate() {
        for (name, t) in net.params().names().iter().zip(net.params().tensors()) {
            put_tensor(&mut out, &format!("net{i}.{name}"), t.shape(), t.data())?;
        }
        for r in net.running() {
            put_tensor(&mut out, &format!("net{i}.{}.running_mean", r.name), &[r.mean.len()], &r.mean)?;
            put_tensor(&mut out, &format!("net{i}.{}.running_var", r.name), &[r.var.len()], &r.var)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Surrogate> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    while !r.done() {
        let nlen = r.take(1)?[0] as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(8 * n)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let mut it = tensors.into_iter();
    let mut nets = Vec::new();
    for (i, nh) in header.nets.into_iter().enumerate() {
        let template = UNet::with_groups(nh.config, nh.groups.clone())?;
        let prefix = format!("net{i}.");
        let mut next = |expect: &str| -> Result<Tensor> {
            let (name, t) = it
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}{expect}")))?;
            if name.strip_prefix(&prefix) != Some(expect) {
                return Err(Error::Checkpoint(format!("expected {prefix}{expect}, found {name}")));
            }
            Ok(t)
        };
        let params = template
            .params()
            .names()
            .iter()
            .map(|n| next(n).map(|t| (n.clone(), t)))
            .collect::<Result<Vec<_>>>()?;
        let running = template
            .running()
            .iter()
            .map(|r| {
                let mean = next(&format!("{}.running_mean", r.name))?.into_data();
                let var = next(&format!("{}.running_var", r.name))?.into_data();
                Ok(RunningNorm {
                    name: r.name.clone(),
                    mean,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nets.push(UNet::from_parts(nh.config, nh.groups, params, running)?);
    }
    if let Some((name, _)) = it.next() {
        return Err(Error::Checkpoint(format!("unexpected trailing tensor {name}")));
    }
    Ok(Surrogate {
        kind: header.kind,
        nets,
        stats: header.stats,
        t_char: header.t_char,
    })
}

pub fn save(path: &Path, model: &Surrogate) -> Result<()> {
    write_atomic(path, &encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Surrogate> {
    decode(&fs::read(path)?)
}
