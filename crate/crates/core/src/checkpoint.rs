//! Checkpoint persistence: a JSON manifest (per-tensor name/shape/dtype/offset
//! plus a config echo and format version) next to a single little-endian raw
//! float blob in a sidecar `.bin` file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Element, ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unsupported dtype {0:?}")]
    Dtype(String),
    #[error("blob truncated: tensor {name} needs bytes {offset}..{end}, blob has {len}")]
    Truncated { name: String, offset: usize, end: usize, len: usize },
    #[error("tensor {name}: shape {got:?} does not match expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("missing tensor {0}")]
    Missing(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_os_string();
    os.push(".bin");
    PathBuf::from(os)
}

/// Write `store` to `path` (JSON manifest) and `path`.bin (raw blob).
pub fn save<E: Element>(path: &Path, store: &ParamStore<E>, config: serde_json::Value) -> Result<(), CheckpointError> {
    let elem = E::DTYPE;
    let width = if elem == "f64" { 8 } else { 4 };
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_elements() * width);
    for (name, tensor) in store.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: elem.to_string(),
            offset: blob.len(),
        });
        for &x in tensor.data() {
            if elem == "f64" {
                blob.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
            } else {
                blob.extend_from_slice(&(x.to_f64().unwrap() as f32).to_le_bytes());
            }
        }
    }

    let manifest = Manifest { format_version: FORMAT_VERSION, dtype: elem.to_string(), config, tensors: entries };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(io_err(path))?;
    let bpath = blob_path(path);
    fs::write(&bpath, &blob).map_err(io_err(&bpath))?;
    Ok(())
}

/// Load a checkpoint, casting stored floats to `E` if precision differs.
pub fn load<E: Element>(path: &Path) -> Result<(ParamStore<E>, Manifest), CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let bpath = blob_path(path);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;

    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(CheckpointError::Dtype(other.to_string())),
        };
        let end = entry.offset + count * width;
        if end > blob.len() {
            return Err(CheckpointError::Truncated {
                name: entry.name.clone(),
                offset: entry.offset,
                end,
                len: blob.len(),
            });
        }
        let bytes = &blob[entry.offset..end];
        let values: Vec<f64> = match entry.dtype.as_str() {
            "f32" => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect(),
            _ => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        store.push(entry.name.clone(), Tensor::<E>::from_f64(entry.shape.clone(), &values).expect("length checked"));
    }
    Ok((store, manifest))
}

/// Validate a loaded store against the shapes a model expects.
pub fn validate_shapes<E: Element>(store: &ParamStore<E>, expected: &[(String, Vec<usize>)]) -> Result<(), CheckpointError> {
    for (name, shape) in expected {
        match store.index_of(name) {
            None => return Err(CheckpointError::Missing(name.clone())),
            Some(i) => {
                let got = store.tensors()[i].shape();
                if got != shape.as_slice() {
                    return Err(CheckpointError::Shape { name: name.clone(), expected: shape.clone(), got: got.to_vec() });
                }
            }
        }
    }
    Ok(())
}

/// Raw bytes of the serialized store, for freeze checks.
pub fn digest<E: Element>(store: &ParamStore<E>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for (name, tensor) in store.iter() {
        bytes.extend_from_slice(name.as_bytes());
        for &x in tensor.data() {
            bytes.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
        }
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_tensors_and_config() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        let path = dir.join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.push("w", Tensor::from_f64(vec![2, 2], &[1.0, -0.5, 0.25, 3.0]).unwrap());
        store.push("b", Tensor::from_f64(vec![2], &[0.0, 9.0]).unwrap());
        let cfg = serde_json::json!({"d": 32});
        save(&path, &store, cfg.clone()).unwrap();
        let (loaded, manifest) = load::<f32>(&path).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(manifest.config, cfg);
        assert_eq!(manifest.tensors[1].offset, 16);
        validate_shapes(&loaded, &[("w".into(), vec![2, 2]), ("b".into(), vec![2])]).unwrap();
        assert!(validate_shapes(&loaded, &[("w".into(), vec![4])]).is_err());
        assert!(validate_shapes(&loaded, &[("missing".into(), vec![1])]).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cross_precision_load_casts() {
        let dir = std::env::temp_dir().join(format!("ckpt-cast-{}", std::process::id()));
        let path = dir.join("m.ckpt");
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_f64(vec![3], &[0.125, -2.5, 7.0]).unwrap());
        save(&path, &store, serde_json::Value::Null).unwrap();
        let (loaded, _) = load::<f32>(&path).unwrap();
        assert_eq!(loaded.get("w").data(), &[0.125f32, -2.5, 7.0]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
