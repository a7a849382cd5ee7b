//! Single-file checkpoint archives.
//!
//! Layout: an 8-byte magic (`MRNCKPT1`), a little-endian `u64` manifest
//! length, a JSON manifest (schema version, config hash, epoch/stage
//! counters, tensor directory, free-form extras), then the raw tensor data
//! as little-endian `f32`, concatenated in directory order.
//!
//! Training runs at `f32`, so saving and loading are bit-exact: resuming from
//! a checkpoint continues the same trajectory, and a save/load round trip
//! reproduces identical evaluation outputs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MrnError, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"MRNCKPT1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// Hash of the canonicalized run configuration; a loader can refuse to
    /// resume under a different configuration.
    pub config_hash: String,
    pub epoch: usize,
    pub stage: u8,
    /// Small structured state that is not a tensor (bank occupancy, step
    /// counters, ...).
    #[serde(default)]
    pub extras: serde_json::Map<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(config_hash: String, epoch: usize, stage: u8) -> Self {
        CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            config_hash,
            epoch,
            stage,
            extras: serde_json::Map::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, params: &ParamSet<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, value) in params.iter() {
        let len = value.len() as u64;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            offset,
            len,
        });
        offset += len * 4;
    }
    let manifest = Manifest { meta: meta.clone(), tensors };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| MrnError::Data(format!("checkpoint manifest encode: {e}")))?;

    let mut buf =
        Vec::with_capacity(MAGIC.len() + 8 + manifest_bytes.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for (_, value) in params.iter() {
        let std = value.as_standard_layout();
        for x in std.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    let mut f = fs::File::create(path).map_err(|e| MrnError::io(path, e))?;
    f.write_all(&buf).map_err(|e| MrnError::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| MrnError::io(path, e))?;
    let fail = |msg: String| MrnError::Data(format!("{}: {msg}", path.display()));

    if bytes.len() < MAGIC.len() + 8 {
        return Err(fail("checkpoint too short for header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad checkpoint magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + mlen;
    if bytes.len() < data_start {
        return Err(fail("checkpoint truncated inside manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| fail(format!("checkpoint manifest decode: {e}")))?;
    if manifest.meta.schema_version != SCHEMA_VERSION {
        return Err(fail(format!(
            "unsupported checkpoint schema version {}",
            manifest.meta.schema_version
        )));
    }

    let data = &bytes[data_start..];
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let elems: usize = entry.shape.iter().product();
        if elems as u64 != entry.len {
            return Err(fail(format!(
                "tensor {}: shape {:?} disagrees with len {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + elems * 4;
        if end > data.len() {
            return Err(fail(format!("tensor {} extends past end of file", entry.name)));
        }
        let mut values = Vec::with_capacity(elems);
        for chunk in data[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
            .map_err(|e| fail(format!("tensor {}: {e}", entry.name)))?;
        params.insert(entry.name.clone(), arr);
    }
    Ok((params, manifest.meta))
}
