//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `PGNCKPT\0`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header (config, layer manifest,
//! tensor table, caller-supplied metadata), then every tensor's values as
//! little-endian floats in table order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::{Critic, CriticConfig};
use crate::error::NetError;
use crate::generator::{Generator, GeneratorConfig};
use crate::manifest::LayerSpec;
use crate::param::Parameterized;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"PGNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

struct Collected<T> {
    entries: Vec<TensorEntry>,
    payload: Vec<T>,
}

impl<T: Real> Collected<T> {
    fn new() -> Self {
        Self { entries: Vec::new(), payload: Vec::new() }
    }

    fn push(&mut self, name: &str, shape: &[usize], values: &[T]) {
        self.entries.push(TensorEntry { name: name.to_string(), shape: shape.to_vec(), offset: self.payload.len() });
        self.payload.extend_from_slice(values);
    }
}

fn encode<T: Real>(header: &CheckpointHeader, payload: &[T]) -> Result<Vec<u8>, NetError> {
    let json = serde_json::to_vec(header).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in payload {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Parse the header and return it with the payload bytes.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), NetError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(NetError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(NetError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| NetError::Checkpoint(format!("header: {e}")))?;
    Ok((header, &body[len..]))
}

fn tensor_table<T: Real>(header: &CheckpointHeader, payload: &[u8]) -> Result<BTreeMap<String, Vec<T>>, NetError> {
    if header.dtype != T::DTYPE {
        return Err(NetError::Checkpoint(format!("checkpoint holds {}, expected {}", header.dtype, T::DTYPE)));
    }
    let mut out = BTreeMap::new();
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let (start, end) = (e.offset * T::BYTES, (e.offset + len) * T::BYTES);
        if end > payload.len() {
            return Err(NetError::Checkpoint(format!("tensor {} runs past the payload", e.name)));
        }
        let vals = payload[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        out.insert(e.name.clone(), vals);
    }
    Ok(out)
}

fn assign<T: Real>(table: &mut BTreeMap<String, Vec<T>>, name: &str, dst: &mut Vec<T>) -> Result<(), NetError> {
    let v = table.remove(name).ok_or_else(|| NetError::Checkpoint(format!("missing tensor {name}")))?;
    if v.len() != dst.len() {
        return Err(NetError::Checkpoint(format!("tensor {name}: {} values, expected {}", v.len(), dst.len())));
    }
    *dst = v;
    Ok(())
}

pub fn generator_to_bytes<T: Real>(g: &Generator<T>, metadata: serde_json::Value) -> Result<Vec<u8>, NetError> {
    let mut c = Collected::new();
    g.visit_params(&mut |p| c.push(&p.name, &p.shape, &p.value));
    g.visit_buffers(&mut |name, v| c.push(name, &[v.len()], v));
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        kind: "generator".into(),
        config: serde_json::to_value(g.config()).map_err(|e| NetError::Checkpoint(e.to_string()))?,
        layers: g.manifest(),
        tensors: c.entries,
        metadata,
    };
    encode(&header, &c.payload)
}

pub fn generator_from_bytes<T: Real>(bytes: &[u8]) -> Result<(Generator<T>, serde_json::Value), NetError> {
    let (header, payload) = decode_header(bytes)?;
    if header.kind != "generator" {
        return Err(NetError::Checkpoint(format!("expected a generator checkpoint, found {}", header.kind)));
    }
    let cfg: GeneratorConfig =
        serde_json::from_value(header.config.clone()).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let mut g = Generator::new(cfg, 0)?;
    let mut table = tensor_table::<T>(&header, payload)?;
    let mut err = None;
    g.visit_params_mut(&mut |p| {
        if err.is_none() {
            err = assign(&mut table, &p.name.clone(), &mut p.value).err();
        }
    });
    g.visit_buffers_mut(&mut |name, v| {
        if err.is_none() {
            err = assign(&mut table, name, v).err();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok((g, header.metadata))
}

pub fn critic_to_bytes<T: Real>(c: &Critic<T>, metadata: serde_json::Value) -> Result<Vec<u8>, NetError> {
    let mut col = Collected::new();
    c.visit_params(&mut |p| col.push(&p.name, &p.shape, &p.value));
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        kind: "critic".into(),
        config: serde_json::to_value(c.config()).map_err(|e| NetError::Checkpoint(e.to_string()))?,
        layers: c.manifest(),
        tensors: col.entries,
        metadata,
    };
    encode(&header, &col.payload)
}

pub fn critic_from_bytes<T: Real>(bytes: &[u8]) -> Result<(Critic<T>, serde_json::Value), NetError> {
    let (header, payload) = decode_header(bytes)?;
    if header.kind != "critic" {
        return Err(NetError::Checkpoint(format!("expected a critic checkpoint, found {}", header.kind)));
    }
    let cfg: CriticConfig =
        serde_json::from_value(header.config.clone()).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let mut c = Critic::new(cfg, 0)?;
    let mut table = tensor_table::<T>(&header, payload)?;
    let mut err = None;
    c.visit_params_mut(&mut |p| {
        if err.is_none() {
            err = assign(&mut table, &p.name.clone(), &mut p.value).err();
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((c, header.metadata)),
    }
}

pub fn save_generator<T: Real>(g: &Generator<T>, metadata: serde_json::Value, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, generator_to_bytes(g, metadata)?)?;
    Ok(())
}

pub fn load_generator<T: Real>(path: &Path) -> Result<(Generator<T>, serde_json::Value), NetError> {
    generator_from_bytes(&std::fs::read(path)?)
}
