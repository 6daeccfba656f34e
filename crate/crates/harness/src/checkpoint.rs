//! Checkpoints: a JSON manifest next to a little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use matchsearch::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    /// Free-form description of what the tensors belong to.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_bytes: usize,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: ParamStore<f64>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

/// Writes `path` (manifest) and the blob beside it with extension `.bin`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut blob = Vec::with_capacity(ck.tensors.numel() * 4);
    let mut entries = Vec::with_capacity(ck.tensors.len());
    for (name, t) in ck.tensors.iter() {
        let offset = blob.len();
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ck.config.clone(),
        meta: ck.meta.clone(),
        tensors: entries,
        blob: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(&bin, &blob)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("bad manifest {}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bin = path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin)?;
    if blob.len() != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(corrupt("blob checksum mismatch"));
    }
    let mut tensors = ParamStore::new();
    let mut next = 0usize;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != next || e.length != numel * 4 || e.offset + e.length > blob.len() {
            return Err(corrupt(format!("bad directory entry for {}", e.name)));
        }
        let data = blob[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if tensors.get(&e.name).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
        tensors.insert(
            e.name.clone(),
            Tensor::from_vec(&e.shape, data).map_err(|err| corrupt(err.to_string()))?,
        );
        next = e.offset + e.length;
    }
    if next != blob.len() {
        return Err(corrupt("directory does not cover the blob"));
    }
    Ok(Checkpoint {
        config: manifest.config,
        meta: manifest.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut tensors = ParamStore::new();
        tensors.insert("a.weight", Tensor::from_vec(&[2, 2], vec![0.1, -2.5, 1e-8, 3.0]).unwrap());
        tensors.insert("a.bias", Tensor::from_vec(&[2], vec![0.0, 7.25]).unwrap());
        Checkpoint {
            config: json!({"seed": 1}),
            meta: json!({"kind": "test"}),
            tensors,
        }
    }

    #[test]
    fn round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let ck = sample();
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn empty_set_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        let ck = Checkpoint {
            config: json!(null),
            meta: json!(null),
            tensors: ParamStore::new(),
        };
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        assert_eq!(fs::read(dir.path().join("e.bin")).unwrap().len(), 0);
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &sample()).unwrap();
        let bin = dir.path().join("m.bin");
        let mut blob = fs::read(&bin).unwrap();
        blob[5] ^= 0x01;
        fs::write(&bin, &blob).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(HarnessError::Checkpoint(_))));
        blob[5] ^= 0x01;
        fs::write(&bin, &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(HarnessError::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &sample()).unwrap();
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&p, text).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }
}
