//! Named-tensor checkpoints: `<stem>.bin` holds little-endian `f32` data,
//! `<stem>.json` the manifest of names, shapes and byte offsets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FORMAT: &str = "mobiforge-tensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes every parameter value (as `f32`) in store order.
pub fn save<T: Real>(store: &ParamStore<T>, stem: &Path) -> Result<Manifest> {
    let (bin, json) = paths(stem);
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut bytes = Vec::with_capacity(store.num_elements() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for &x in p.value.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        tensors,
    };
    fs::write(&bin, bytes)?;
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a checkpoint into a fresh store, preserving manifest order.
pub fn load<T: Real>(stem: &Path) -> Result<ParamStore<T>> {
    let (bin, json) = paths(stem);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&json)?)?;
    if manifest.format != FORMAT || manifest.dtype != "f32" {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let bytes = fs::read(&bin)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 4;
        if end > bytes.len() {
            return Err(TensorError::Checkpoint(format!("tensor `{}` runs past end of data", e.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(store)
}
