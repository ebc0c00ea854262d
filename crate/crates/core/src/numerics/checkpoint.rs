//! Checkpoint directory: `manifest.json` lists every tensor as
//! `{name, shape, dtype: "f32", byte_offset, byte_length}` and `weights.bin`
//! holds the concatenated little-endian f32 data in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_length: usize,
}

pub fn encode(params: &ParamStore<f32>) -> (Vec<ManifestEntry>, Vec<u8>) {
    let mut manifest = Vec::with_capacity(params.len());
    let mut bytes = Vec::with_capacity(params.num_scalars() * 4);
    for (_, p) in params.iter() {
        let byte_offset = bytes.len();
        for &x in p.tensor.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset,
            byte_length: bytes.len() - byte_offset,
        });
    }
    (manifest, bytes)
}

/// Writes the two checkpoint files into `dir` (created if missing). Each
/// file is written to a temporary name and renamed into place.
pub fn save(params: &ParamStore<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, bytes) = encode(params);
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads weights into `params`, whose names and shapes define what the
/// checkpoint must contain. The first mismatch is reported by tensor name.
pub fn load_into(params: &mut ParamStore<f32>, dir: &Path) -> Result<()> {
    let mpath = dir.join(MANIFEST_FILE);
    let wpath = dir.join(WEIGHTS_FILE);
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let expected: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some(entry) = manifest.get(i) else {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            });
        };
        if &entry.name != name {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                msg: format!("checkpoint has `{}` at this position", entry.name),
            });
        }
        if &entry.shape != shape {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                msg: format!("shape {:?} in checkpoint, model expects {:?}", entry.shape, shape),
            });
        }
        let numel: usize = shape.iter().product();
        if entry.dtype != "f32" || entry.byte_length != numel * 4 || entry.byte_offset + entry.byte_length > bytes.len()
        {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                msg: "bad dtype or byte range".into(),
            });
        }
        let data = bytes[entry.byte_offset..entry.byte_offset + entry.byte_length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let id = params.id(name).expect("name from store");
        params.get_mut(id).tensor = Tensor::new(shape.clone(), data)?;
    }
    if let Some(extra) = manifest.get(expected.len()) {
        return Err(Error::CheckpointMismatch {
            name: extra.name.clone(),
            msg: "not part of the model".into(),
        });
    }
    Ok(())
}
