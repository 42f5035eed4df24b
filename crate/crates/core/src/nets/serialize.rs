//! Flat little-endian `f64` blob plus a JSON-friendly shape manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const PARAM_FORMAT: &str = "autoiv-params/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

/// Writes the blob to `blob_path` and returns the matching manifest.
pub fn save_params(store: &ParamStore, blob_path: &Path) -> Result<ParamManifest> {
    let mut bytes = Vec::with_capacity(store.numel() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let t = store.get(id);
        entries.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    fs::write(blob_path, &bytes).map_err(|e| Error::io(blob_path, e))?;
    Ok(ParamManifest {
        format: PARAM_FORMAT.to_string(),
        entries,
        total: offset,
    })
}

pub fn load_params(manifest: &ParamManifest, blob_path: &Path) -> Result<ParamStore> {
    if manifest.format != PARAM_FORMAT {
        return Err(Error::Format(format!(
            "unsupported parameter format {:?}",
            manifest.format
        )));
    }
    let bytes = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    if bytes.len() != manifest.total * 8 {
        return Err(Error::Format(format!(
            "blob has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let len: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Format(format!("entry {} runs past the blob", e.name)))?
            .to_vec();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(store)
}
