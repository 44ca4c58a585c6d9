//! On-disk weight format.
//!
//! ```text
//! GROWCLIP-CHECKPOINT\n
//! {"format_version":1,"spec":{..},"tensors":[{"name":..,"shape":[..],"offset":..}],..}\n
//! <little-endian f32 payload>
//! ```
//!
//! Offsets are byte offsets into the payload. Loading rebuilds the store
//! through [`WeightStore::from_tensors`], so the name set is checked against
//! the embedded spec in both directions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::ArchSpec;
use super::store::WeightStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "GROWCLIP-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ArchSpec,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// A loaded checkpoint: weights plus free-form metadata (step, mode, ...).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub weights: WeightStore<f32>,
    pub meta: BTreeMap<String, String>,
}

pub fn encode(weights: &WeightStore<f32>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(weights.len());
    let mut payload = Vec::with_capacity(weights.numel() * 4);
    for (name, t) in weights.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: weights.spec().clone(),
        tensors: entries,
        meta: meta.clone(),
    };
    let mut out = format!("{MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let magic_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing magic line".into()))?;
    if &bytes[..magic_end] != MAGIC.as_bytes() {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let rest = &bytes[magic_end + 1..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &rest[header_end + 1..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 4;
        if end > payload.len() {
            return Err(bad(format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(e.name, Tensor::new(e.shape, data)?);
    }
    let weights = WeightStore::from_tensors(header.spec, tensors)?;
    Ok(Checkpoint {
        weights,
        meta: header.meta,
    })
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save(path: &Path, weights: &WeightStore<f32>, meta: &BTreeMap<String, String>) -> Result<()> {
    write_atomic(path, &encode(weights, meta))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
