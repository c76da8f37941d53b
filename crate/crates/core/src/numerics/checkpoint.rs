//! Checkpoint files: an 8-byte little-endian header length, a JSON header, then
//! raw little-endian `f32` tensor data in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};
use crate::numerics::params::ParameterStore;
use crate::numerics::tensor::Tensor;

pub const FORMAT: &str = "kvec-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// Model hyperparameters and anything else the writer wants to keep.
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store` with the tensor of the same name.
    pub fn load_into(&self, store: &mut ParameterStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| KvecError::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != store.value(id).shape() {
                return Err(KvecError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Serializes the given stores (in order) into one checkpoint byte vector.
pub fn encode(metadata: serde_json::Value, stores: &[&ParameterStore]) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for store in stores {
        for id in store.ids() {
            let t = store.value(id);
            let offset = data.len();
            for &x in t.data() {
                data.extend_from_slice(&(x as f32).to_le_bytes());
            }
            entries.push(TensorEntry {
                name: store.name(id).to_string(),
                shape: [t.rows(), t.cols()],
                dtype: "f32".into(),
                offset,
                bytes: data.len() - offset,
            });
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        metadata,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| KvecError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad("unsupported format or version"));
    }
    let data = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(KvecError::Checkpoint(format!("unsupported dtype `{}`", e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        if e.bytes != n * 4 || e.offset + e.bytes > data.len() {
            return Err(KvecError::Checkpoint(format!("bad extent for `{}`", e.name)));
        }
        let values = data[e.offset..e.offset + e.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], values)?));
    }
    Ok(Checkpoint {
        metadata: header.metadata,
        tensors,
    })
}

pub fn save(path: &Path, metadata: serde_json::Value, stores: &[&ParameterStore]) -> Result<()> {
    let bytes = encode(metadata, stores)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}
