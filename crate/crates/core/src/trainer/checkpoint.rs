//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (resolved config, step, optimizer step, tensor directory), then every
//! tensor's `f32` values in little-endian order, in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fra_tensor::{OptimizerState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{FraError, Result};
use crate::networks::{ModelPair, MOMENTUM, ONLINE};

const MAGIC: &[u8; 8] = b"FRACKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: String,
    step: u64,
    optimizer_step: u64,
    entries: Vec<Entry>,
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub pair: ModelPair<f32>,
    pub optimizer: OptimizerState<f32>,
}

const ONLINE_PARAMS: &str = "online.param";
const ONLINE_BUFFERS: &str = "online.buffer";
const MOMENTUM_PARAMS: &str = "momentum.param";
const MOMENTUM_BUFFERS: &str = "momentum.buffer";
const OPTIMIZER: &str = "optimizer";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<&Tensor<f32>> = Vec::new();
        let add = |entries: &mut Vec<Entry>, group: &str, name: &str, t: &Tensor<f32>| {
            entries.push(Entry { group: group.into(), name: name.into(), shape: t.shape().to_vec() });
        };
        for (n, t) in self.pair.online.params() {
            add(&mut entries, ONLINE_PARAMS, n, t);
            payload.push(t);
        }
        for (n, t) in self.pair.online.buffers() {
            add(&mut entries, ONLINE_BUFFERS, n, t);
            payload.push(t);
        }
        for (n, t) in self.pair.momentum.params() {
            add(&mut entries, MOMENTUM_PARAMS, n, t);
            payload.push(t);
        }
        for (n, t) in self.pair.momentum.buffers() {
            add(&mut entries, MOMENTUM_BUFFERS, n, t);
            payload.push(t);
        }
        for (n, slots) in &self.optimizer.slots {
            for (i, t) in slots.iter().enumerate() {
                add(&mut entries, OPTIMIZER, &format!("{n}#{i}"), t);
                payload.push(t);
            }
        }
        let header = Header {
            config: self.config.to_toml(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = payload.iter().map(|t| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| FraError::format(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| FraError::format(path, format!("bad header: {e}")))?;
        let config = RunConfig::from_toml(&header.config)?;
        let mut online = ParamStore::new(ONLINE);
        let mut momentum = ParamStore::new(MOMENTUM);
        let mut slots: BTreeMap<String, Vec<Tensor<f32>>> = BTreeMap::new();
        let mut offset = hend;
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let end = offset.checked_add(n * 4).filter(|&x| x <= bytes.len()).ok_or_else(|| bad("truncated payload"))?;
            let data: Vec<f32> =
                bytes[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            offset = end;
            let t = Tensor::new(e.shape.clone(), data);
            match e.group.as_str() {
                ONLINE_PARAMS => online.insert(e.name.clone(), t),
                ONLINE_BUFFERS => online.insert_buffer(e.name.clone(), t),
                MOMENTUM_PARAMS => momentum.insert(e.name.clone(), t),
                MOMENTUM_BUFFERS => momentum.insert_buffer(e.name.clone(), t),
                OPTIMIZER => {
                    let (name, idx) = e.name.rsplit_once('#').ok_or_else(|| bad("bad optimizer entry name"))?;
                    let idx: usize = idx.parse().map_err(|_| bad("bad optimizer slot index"))?;
                    let v = slots.entry(name.to_string()).or_default();
                    if v.len() != idx {
                        return Err(bad("optimizer slots out of order"));
                    }
                    v.push(t);
                }
                other => return Err(FraError::format(path, format!("unknown tensor group {other:?}"))),
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let pair = ModelPair { online, momentum };
        pair.check_topology()?;
        Ok(Self { config, step: header.step, pair, optimizer: OptimizerState { step: header.optimizer_step, slots } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| FraError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| FraError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| FraError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FraError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
