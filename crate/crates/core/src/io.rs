//! File formats: `WTT1` tensors, PGM heatmaps, and checkpoint directories.
//!
//! `WTT1` layout (all little-endian): the four magic bytes `WTT1`, a `u32`
//! rank, `rank` × `u64` dimensions, then the `f32` payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeakTrError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WTT_MAGIC: &[u8; 4] = b"WTT1";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(WTT_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |reason: &str| WeakTrError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != WTT_MAGIC {
        return Err(bad("missing WTT1 magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 8 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes, path)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Min-max normalizes `values` to 0..=255. A constant map becomes all zeros.
pub fn to_gray8<T: Scalar>(values: &[T]) -> Vec<u8> {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > T::zero() {
                ((v - lo) / range * T::lit(255.0)).round().as_f64() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_atomic(path.as_ref(), &bytes)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

/// Writes every parameter as a `WTT1` file plus a manifest. The directory is
/// assembled under a temporary name and renamed into place.
pub fn save_checkpoint<T: Scalar, C: Serialize>(
    dir: impl AsRef<Path>,
    kind: &str,
    config: &C,
    store: &ParamStore<T>,
) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = sibling(dir, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("params"))?;
    let mut entries = Vec::with_capacity(store.len());
    for (i, p) in store.iter().enumerate() {
        let file = format!("params/{i:04}.wtt");
        fs::write(tmp.join(&file), encode_tensor(&p.value))?;
        entries.push(ManifestEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        params: entries,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        let old = sibling(dir, ".old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(old)?;
    } else {
        if let Some(parent) = dir.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    dir.with_file_name(name)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a checkpoint's manifest and parameters in manifest order.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Manifest, ParamStore<T>)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let t: Tensor<T> = read_tensor(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(WeakTrError::Format {
                path: dir.join(&e.file),
                reason: format!("shape {:?} disagrees with manifest {:?}", t.shape(), e.shape),
            });
        }
        store.add(e.name.clone(), t);
    }
    Ok((manifest, store))
}
