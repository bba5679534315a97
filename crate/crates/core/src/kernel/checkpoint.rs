//! Checkpoint IO: magic `DMIFORGE`, version, JSON manifest (names, shapes,
//! offsets, vocab hash, config echo), then a little-endian f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use super::tensor::Tensor;
use super::KernelError;

const MAGIC: &[u8; 8] = b"DMIFORGE";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    vocab_hash: u64,
    config: serde_json::Value,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub store: ParamStore,
    pub vocab_hash: u64,
    pub config: serde_json::Value,
}

pub fn save_checkpoint(
    store: &ParamStore,
    vocab_hash: u64,
    config: &serde_json::Value,
    path: &Path,
) -> Result<(), KernelError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_owned(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        params: entries,
        vocab_hash,
        config: config.clone(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| KernelError::BadManifest(e.to_string()))?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Load a checkpoint, verifying magic, version, and (when given) the
/// expected vocabulary hash. Fresh optimizer state.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: Option<u64>,
) -> Result<LoadedCheckpoint, KernelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(KernelError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(KernelError::BadVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let manifest_end = 20usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| KernelError::BadManifest("manifest overruns file".to_owned()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])
        .map_err(|e| KernelError::BadManifest(e.to_string()))?;

    if let Some(expected) = expected_vocab_hash {
        if manifest.vocab_hash != expected {
            return Err(KernelError::VocabHashMismatch {
                expected,
                found: manifest.vocab_hash,
            });
        }
    }

    let payload = &bytes[manifest_end..];
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(KernelError::BadManifest(format!(
                "parameter {:?} overruns payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(LoadedCheckpoint {
        store,
        vocab_hash: manifest.vocab_hash,
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, -0.0]).unwrap())
            .unwrap();
        s.insert("b.bias", Tensor::vector(vec![0.25, 3.5]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let config = serde_json::json!({"hidden": 8, "lr": 0.0002});
        save_checkpoint(&store, 0xdead_beef, &config, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(0xdead_beef)).unwrap();
        assert_eq!(loaded.vocab_hash, 0xdead_beef);
        assert_eq!(loaded.config, config);
        for (name, tensor) in store.iter() {
            let got = loaded.store.get(name).unwrap();
            assert_eq!(got.shape(), tensor.shape());
            for (a, b) in got.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{}", name);
            }
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), 1, &serde_json::json!({}), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(KernelError::BadMagic)));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), 1, &serde_json::json!({}), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(KernelError::BadVersion(99))
        ));
    }

    #[test]
    fn vocab_hash_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), 7, &serde_json::json!({}), &path).unwrap();
        match load_checkpoint(&path, Some(8)) {
            Err(KernelError::VocabHashMismatch { expected: 8, found: 7 }) => {}
            other => panic!("expected hash mismatch, got {:?}", other),
        }
        // no expectation -> loads fine
        assert!(load_checkpoint(&path, None).is_ok());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), 1, &serde_json::json!({}), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
