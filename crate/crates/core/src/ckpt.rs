//! Versioned checkpoint container: JSON metadata (hyperparameters and
//! lineage) followed by named f64 parameter tensors, little-endian.

use crate::mat::Mat;
use crate::nn::ParamStore;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"ELVC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("metadata error: {0}")]
    Meta(String),
}

pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, params: &ParamStore) -> Result<(), CkptError> {
    let io_err = |e: std::io::Error| CkptError::Io {
        path: path.display().to_string(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| CkptError::Meta(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, mat) in params.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(mat.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(mat.cols as u64).to_le_bytes());
        for &v in &mat.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let io_err = |e: std::io::Error| CkptError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    let corrupt = |reason: &str| CkptError::Corrupt {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    macro_rules! take {
        ($n:expr) => {{
            let n = $n;
            if pos + n > bytes.len() {
                return Err(corrupt("truncated"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            s
        }};
    }
    if take!(4) != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take!(4).try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(take!(8).try_into().unwrap()) as usize;
    let meta: serde_json::Value =
        serde_json::from_slice(take!(meta_len)).map_err(|e| CkptError::Meta(e.to_string()))?;
    let n_params = u64::from_le_bytes(take!(8).try_into().unwrap()) as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name_len = u64::from_le_bytes(take!(8).try_into().unwrap()) as usize;
        let name = String::from_utf8(take!(name_len).to_vec())
            .map_err(|_| corrupt("non-utf8 parameter name"))?;
        let rows = u64::from_le_bytes(take!(8).try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take!(8).try_into().unwrap()) as usize;
        let raw = take!(rows * cols * 8);
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(&name, Mat::from_vec(rows, cols, data));
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn round_trip_preserves_meta_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        let mut rng = Prng::seed_from_u64(8);
        store.add_glorot("enc.w", 3, 4, &mut rng);
        store.add_glorot("dec.w", 2, 2, &mut rng);
        let meta = serde_json::json!({"stage": "test", "d_model": 4});
        save_checkpoint(&path, &meta, &store).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.params.len(), 2);
        assert_eq!(back.params.value(0), store.value(0));
        assert_eq!(back.params.name(1), "dec.w");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
