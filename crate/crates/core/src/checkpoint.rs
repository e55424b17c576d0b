//! Binary tensor files and gated checkpoints.
//!
//! Layout: 8-byte magic `HIAPCKP1`, a little-endian `u64` header length, a
//! JSON header `{meta, tensors: [{name, shape, offset, nbytes}]}`, then the
//! raw little-endian `f32` data. Offsets are relative to the data section.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gating::GateBank;
use crate::model::{Architecture, ModelConfig, VitParams, VitWeights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HIAPCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn encode_tensors(meta: &serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let nbytes = 4 * t.numel() as u64;
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    atomic_write(path, &encode_tensors(meta, tensors)?)
}

/// Decoded tensor file.
#[derive(Debug)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: HashMap<String, Tensor<f32>>,
    pub order: Vec<String>,
}

impl TensorFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("<tensor file>", r.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = HashMap::new();
        let mut order = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.nbytes != 4 * n as u64 {
                return Err(bad(&format!("tensor {}: byte count does not match shape", e.name)));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| bad(&format!("tensor {}: data truncated", e.name)))?;
            let vals = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape, vals)?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(&format!("duplicate tensor {}", e.name)));
            }
            order.push(e.name);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
            order,
        })
    }

    /// Removes and returns a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::format("<tensor file>", format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::format(
                "<tensor file>",
                format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    /// Rebuilds model weights for `arch`.
    pub fn take_weights(&mut self, arch: &Architecture) -> Result<VitWeights<f32>> {
        VitParams::shapes(arch).try_map(&mut |name, shape| Ok(self.take(name, shape)?.with_grad()))
    }
}

pub fn weight_entries(w: &VitWeights<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    w.map(|name, t| out.push((name.to_string(), t)));
    out
}

/// Weights and gate logits of a gated model.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedCheckpoint {
    pub config: ModelConfig,
    pub weights: VitWeights<f32>,
    pub gates: GateBank<f32>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct GatedMeta {
    kind: String,
    config: ModelConfig,
    step: u64,
}

const GATE_NAMES: [&str; 4] = ["gates.head", "gates.block", "gates.dim", "gates.neuron"];

impl GatedCheckpoint {
    pub fn architecture(&self) -> Architecture {
        Architecture::dense(&self.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(GatedMeta {
            kind: "gated".into(),
            config: self.config,
            step: self.step,
        })?;
        let mut entries = weight_entries(&self.weights);
        let g = &self.gates;
        for (name, t) in GATE_NAMES.iter().zip([&g.head, &g.block, &g.dim, &g.neuron]) {
            entries.push((name.to_string(), t));
        }
        encode_tensors(&meta, &entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = TensorFile::read(path)?;
        let meta: GatedMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::format(path, format!("not a gated checkpoint: {e}")))?;
        if meta.kind != "gated" {
            return Err(Error::format(path, format!("expected a gated checkpoint, found {:?}", meta.kind)));
        }
        meta.config.validate()?;
        let arch = Architecture::dense(&meta.config);
        let with_path = |e: Error| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        };
        let weights = file.take_weights(&arch).map_err(with_path)?;
        let shell = GateBank::<f32>::new(&meta.config, 0.0);
        let mut take = |i: usize, shape: &[usize]| file.take(GATE_NAMES[i], shape).map(|t| t.with_grad()).map_err(with_path);
        let gates = GateBank {
            head: take(0, shell.head.shape())?,
            block: take(1, shell.block.shape())?,
            dim: take(2, shell.dim.shape())?,
            neuron: take(3, shell.neuron.shape())?,
        };
        if !weights.is_finite() || gates.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::format(path, "checkpoint holds non-finite values"));
        }
        Ok(Self {
            config: meta.config,
            weights,
            gates,
            step: meta.step,
        })
    }
}
