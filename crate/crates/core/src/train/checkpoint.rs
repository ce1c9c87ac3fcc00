//! Self-describing checkpoint container:
//!
//! ```text
//! b"CAPSCKPT" | u32 LE version | u64 LE header length | JSON header | f32 LE payload
//! ```
//!
//! The header holds the model spec, tensor names with 64-bit extents, the
//! running normalisation statistics layout and training metadata. The payload
//! is every parameter tensor in header order, then each running mean and
//! variance, then the optional Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::ops::RunningStats;
use crate::tensor::Tensor;
use crate::train::adam::OptimizerState;

pub const MAGIC: &[u8; 8] = b"CAPSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub test_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunningEntry {
    layer: u64,
    channels: u64,
    updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    running: Vec<RunningEntry>,
    optimizer_step: Option<u64>,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub meta: CheckpointMeta,
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().iter().map(|&d| d as u64).collect(),
                })
                .collect(),
            running: self
                .params
                .running()
                .iter()
                .map(|(layer, s)| RunningEntry {
                    layer: *layer as u64,
                    channels: s.mean.len() as u64,
                    updates: s.updates,
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            push_f32(&mut out, t.data());
        }
        for (_, s) in self.params.running() {
            push_f32(&mut out, &s.mean);
            push_f32(&mut out, &s.var);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                push_f32(&mut out, t.data());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fmt("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fmt("header truncated"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| fmt(&format!("bad header: {e}")))?;
        header.spec.validate().map_err(|e| fmt(&e.to_string()))?;

        let mut cursor = header_end;
        let mut take = |count: usize| -> Result<Vec<f32>> {
            let end = count
                .checked_mul(4)
                .and_then(|b| b.checked_add(cursor))
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| fmt("payload truncated"))?;
            let values = bytes[cursor..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cursor = end;
            Ok(values)
        };

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let shape: Vec<usize> = entry
                .shape
                .iter()
                .map(|&d| usize::try_from(d).map_err(|_| fmt("extent exceeds address space")))
                .collect::<Result<_>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt("extent overflow"))?;
            let t = Tensor::new(&shape, take(count)?).map_err(|e| fmt(&e.to_string()))?;
            tensors.push((entry.name.clone(), t));
        }
        let mut running = Vec::with_capacity(header.running.len());
        for entry in &header.running {
            let c = entry.channels as usize;
            running.push((
                entry.layer as usize,
                RunningStats {
                    mean: take(c)?,
                    var: take(c)?,
                    updates: entry.updates,
                },
            ));
        }
        let params = ModelParams::from_parts(tensors, running)?;
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
                let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
                    Tensor::new(shape, take(shape.iter().product())?).map_err(|e| fmt(&e.to_string()))
                };
                let m = shapes.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { m, v, step })
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(fmt(&format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Self {
            spec: header.spec,
            params,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
