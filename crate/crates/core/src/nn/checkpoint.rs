//! Checkpoint directories: `manifest.json` plus one raw little-endian file per parameter.
//!
//! Writes go to a sibling temporary directory that is renamed into place only
//! after every file (manifest last) is on disk, so a failed save never leaves
//! a partial manifest behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// What produced the checkpoint: `vqvae`, `mim` or `tsr`.
    pub tag: String,
    pub dtype: String,
    pub seed: u64,
    /// Configuration the parameters were built from.
    pub config: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

pub fn save<T: Real>(
    dir: &Path,
    store: &ParamStore<T>,
    tag: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<Manifest> {
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut params = Vec::with_capacity(store.len());
    let mut buf = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        let file = format!("{:04}_{}.bin", id.index(), store.name(id));
        buf.clear();
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        let path = tmp.join(&file);
        fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        params.push(ParamRecord { name: store.name(id).to_string(), shape: t.shape().to_vec(), file });
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tag: tag.to_string(),
        dtype: T::DTYPE.to_string(),
        seed,
        config,
        params,
    };
    let path = tmp.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

/// Loads every parameter of a checkpoint into a fresh store.
pub fn load<T: Real>(dir: &Path) -> Result<(ParamStore<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "dtype {} (expected {})",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut store = ParamStore::new();
    for rec in &manifest.params {
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let numel: usize = rec.shape.iter().product();
        if bytes.len() != numel * T::BYTES {
            return Err(Error::CheckpointMismatch(format!(
                "{}: {} bytes for shape {:?}",
                rec.name,
                bytes.len(),
                rec.shape
            )));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        store.add(rec.name.clone(), Tensor::new(rec.shape.clone(), data)?);
    }
    Ok((store, manifest))
}

/// Loads the `<prefix>*` parameters of a checkpoint into `store`, validating shapes.
pub fn load_into<T: Real>(dir: &Path, store: &mut ParamStore<T>, prefix: &str) -> Result<Manifest> {
    let (src, manifest) = load::<T>(dir)?;
    store.load_prefix(&src, prefix)?;
    Ok(manifest)
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}
