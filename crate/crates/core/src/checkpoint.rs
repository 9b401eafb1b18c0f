//! Binary tensor storage: one little-endian blob holding every tensor
//! back to back, plus a JSON manifest with shapes, offsets and SHA-256
//! checksums.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<stem>.bin` and `<stem>.manifest.json` into `dir`.
pub fn save_tensors<T: Scalar>(dir: &Path, stem: &str, tensors: &[Tensor<T>]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let start = blob.len();
        for &x in &t.data {
            x.write_le(&mut blob);
        }
        entries.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: T::DTYPE.to_string(),
            offset: start as u64,
            bytes: (blob.len() - start) as u64,
            sha256: sha256_hex(&blob[start..]),
        });
    }
    let manifest = Manifest {
        blob: blob_name.clone(),
        tensors: entries,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&dir.join(format!("{stem}.manifest.json")), &manifest)?;
    Ok(manifest)
}

/// Reads tensors written by [`save_tensors`], verifying dtype, sizes and
/// checksums.
pub fn load_tensors<T: Scalar>(dir: &Path, stem: &str) -> Result<Vec<Tensor<T>>> {
    let manifest: Manifest = read_json(&dir.join(format!("{stem}.manifest.json")))?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{} is stored as {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.bytes as usize);
        if len != numel * T::BYTES || start + len > blob.len() {
            return Err(Error::Checkpoint(format!("{}: bad extent in manifest", e.name)));
        }
        let bytes = &blob[start..start + len];
        if sha256_hex(bytes) != e.sha256 {
            return Err(Error::Checkpoint(format!("{}: checksum mismatch", e.name)));
        }
        out.push(Tensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: bytes.chunks_exact(T::BYTES).map(T::read_le).collect(),
        });
    }
    Ok(out)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Checkpoint(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string(value)
        .map_err(|e| Error::Checkpoint(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![
            Tensor {
                name: "a".into(),
                shape: vec![2, 2],
                data: vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE],
            },
            Tensor {
                name: "b".into(),
                shape: vec![3],
                data: vec![0.0f32, 1e-30, 7.0],
            },
        ];
        let m = save_tensors(dir.path(), "params", &tensors).unwrap();
        assert_eq!(m.tensors[1].offset, 16);
        let back: Vec<Tensor<f32>> = load_tensors(dir.path(), "params").unwrap();
        assert_eq!(back, tensors);
        assert!(load_tensors::<f64>(dir.path(), "params").is_err());

        let blob = dir.path().join("params.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[17] ^= 1;
        fs::write(&blob, bytes).unwrap();
        let err = load_tensors::<f32>(dir.path(), "params").unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
