//! Weight files: a JSON manifest plus a raw little-endian `f32` blob.
//!
//! The manifest lists tensors in storage order with their shapes; the blob
//! (same path, `.bin` extension) holds their elements back to back, each
//! tensor in row-major order. Free-form metadata rides along under `meta`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Params, Result, Scalar, Tensor};

pub const FORMAT: &str = "panoscrub-weights";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Value,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `params` (converted to `f32`) to `path` and its sibling blob.
pub fn save<T: Scalar>(path: &Path, params: &Params<T>, meta: Value) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(params.numel() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32".into(),
        endianness: "little".into(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
        meta,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a weight file, checking the blob length against the manifest.
pub fn load(path: &Path) -> Result<(Manifest, Params<f32>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.dtype != "f32" || manifest.endianness != "little" {
        return Err(Error::Format(format!(
            "unsupported encoding {} / {}",
            manifest.dtype, manifest.endianness
        )));
    }
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_file)?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "blob {} has {} bytes, manifest describes {expected}",
            blob_file.display(),
            bytes.len()
        )));
    }
    let mut params = Params::new();
    let mut offset = 0;
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = bytes[offset..offset + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += numel * 4;
        let tensor = Tensor::new(&entry.shape, data)
            .map_err(|e| Error::Format(format!("tensor `{}`: {e}", entry.name)))?;
        params.push(entry.name.clone(), tensor);
    }
    Ok((manifest, params))
}

/// Copies loaded tensors into `target`, requiring identical names and shapes.
pub fn assign<T: Scalar>(target: &mut Params<T>, loaded: &Params<f32>) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, file has {}",
            target.len(),
            loaded.len()
        )));
    }
    for k in 0..target.len() {
        let (want, have) = (&target.names()[k], &loaded.names()[k]);
        if want != have || target.get(k).shape() != loaded.get(k).shape() {
            return Err(Error::Format(format!(
                "tensor {k}: expected `{want}` {:?}, found `{have}` {:?}",
                target.get(k).shape(),
                loaded.get(k).shape()
            )));
        }
        *target.get_mut(k) = loaded.get(k).cast();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Params<f32> {
        let mut p = Params::new();
        p.push("a.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.25 - 1.0));
        p.push("a.bias", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let p = sample();
        save(&path, &p, serde_json::json!({"seed": 3})).unwrap();
        let (manifest, loaded) = load(&path).unwrap();
        assert_eq!(manifest.meta["seed"], 3);
        for (a, b) in p.tensors().iter().zip(loaded.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        save(&path, &sample(), Value::Null).unwrap();
        let blob = blob_path(&path);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn assign_rejects_shape_mismatch() {
        let mut target = sample();
        let mut other = Params::new();
        other.push("a.weight", Tensor::<f32>::zeros(&[2, 1, 1, 1]));
        other.push("a.bias", Tensor::<f32>::zeros(&[2]));
        assert!(matches!(assign(&mut target, &other), Err(Error::Format(_))));
    }
}
