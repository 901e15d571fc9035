//! Versioned checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PGCKPT\0\0"
//! 8       4     u32    format version (currently 1)
//! 12      8     u64    manifest length M in bytes
//! 20      M     UTF-8 JSON manifest
//! 20+M    ...   f64 parameter data, parameters in manifest order, row-major
//! ...     ...   if manifest.optimizer is present: Adam first moments for every
//!               parameter, then second moments, same order and layout
//! ```
//!
//! The manifest holds the architecture config, parameter names/shapes/trainable
//! flags, optimizer hyperparameters and step counter, and an opaque `extra`
//! value for trainer state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, AdamState, NnError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
    extra: serde_json::Value,
}

fn write_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                config: o.config,
                step: o.state.step,
            }),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.store.num_scalars() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            write_f64s(&mut out, p.value.data());
        }
        if let Some(opt) = &self.optimizer {
            for m in &opt.state.m {
                write_f64s(&mut out, m.data());
            }
            for v in &opt.state.v {
                write_f64s(&mut out, v.data());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let err = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| err("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut cursor = 20 + mlen;
        let mut read = |shape: &[usize]| -> Result<Tensor, NnError> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| err("truncated tensor data"))?;
            cursor += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape, data)
        };
        let mut store = ParamStore::new();
        for p in &manifest.params {
            let id = store.add(p.name.clone(), read(&p.shape)?)?;
            store.set_trainable(id, p.trainable);
        }
        let optimizer = match manifest.optimizer {
            Some(o) => {
                let m = manifest
                    .params
                    .iter()
                    .map(|p| read(&p.shape))
                    .collect::<Result<Vec<_>, _>>()?;
                let v = manifest
                    .params
                    .iter()
                    .map(|p| read(&p.shape))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(Adam {
                    config: o.config,
                    state: AdamState { step: o.step, m, v },
                })
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(err("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: manifest.config,
            store,
            optimizer,
            extra: manifest.extra,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
