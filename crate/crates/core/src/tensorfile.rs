//! Single-file tensor container used for weights and checkpoints.
//!
//! Layout: one line of compact JSON (the manifest) terminated by `\n`,
//! followed by the blob region: every tensor as little-endian f32, in
//! manifest order. The manifest records each tensor's name, shape, byte
//! offset into the blob, and a CRC-32 (IEEE) of the whole blob region.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "asag-tensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob region.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

pub fn encode_f32(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[Tensor]) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
        });
        encode_f32(&t.data, &mut blob);
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        meta,
        tensors: entries,
        blob_bytes: blob.len(),
        crc32: crc32fast::hash(&blob),
    };
    let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read(path: &Path, kind: &str) -> Result<(Manifest, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing manifest line"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::format(path, format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} file, found {}", manifest.kind),
        ));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Checksum(format!(
            "{}: blob is {} bytes, manifest declares {}",
            path.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let crc = crc32fast::hash(blob);
    if crc != manifest.crc32 {
        return Err(Error::Checksum(format!(
            "{}: crc32 {crc:#010x}, manifest declares {:#010x}",
            path.display(),
            manifest.crc32
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::format(path, format!("tensor {} overruns the blob", e.name)));
        }
        tensors.push(Tensor::new(e.name.clone(), e.shape.clone(), decode_f32(&blob[e.offset..end])));
    }
    Ok((manifest, tensors))
}

/// Name-indexed lookup over decoded tensors.
pub struct TensorSet {
    tensors: Vec<Tensor>,
}

impl TensorSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
        let t = self.tensors.swap_remove(pos);
        if t.shape != shape {
            return Err(Error::Shape(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.data)
    }
}
