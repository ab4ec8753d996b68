//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"RSTCKPT\x01"
//! bytes 8..16   u64 header length in bytes
//! header        JSON: {version, epoch, iteration, extra, tensors:[
//!                 {name, shape, offset, len}]}  (offset/len in elements)
//! payload       f64 little-endian, concatenated in tensor order
//! ```
//!
//! `extra` is an opaque JSON object owned by the writer (the trainer stores
//! its config, rng positions, and optimizer step counts there). Tensors are
//! written and restored bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::Arr;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 8] = *b"RSTCKPT\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    iteration: u64,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: named tensors plus counters and writer-owned JSON.
pub struct Checkpoint {
    pub epoch: usize,
    pub iteration: u64,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Arr)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Arr> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, arr) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
                len: arr.len(),
            });
            offset += arr.len();
        }
        let header = Header {
            version: FORMAT_VERSION,
            epoch: self.epoch,
            iteration: self.iteration,
            extra: self.extra.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::CheckpointFormatError(format!("header encode: {e}")))?;

        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
        for (_, arr) in &self.tensors {
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormatError(
                "bad magic; not a checkpoint file".into(),
            ));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::CheckpointFormatError(format!("header decode: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::CheckpointFormatError(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let expect: usize = entry.shape.iter().product();
            if expect != entry.len {
                return Err(Error::CheckpointFormatError(format!(
                    "tensor `{}` shape/len mismatch",
                    entry.name
                )));
            }
            let mut data = vec![0f64; entry.len];
            let mut buf = [0u8; 8];
            for slot in data.iter_mut() {
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                *slot = f64::from_le_bytes(buf);
            }
            let arr = Arr::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::CheckpointFormatError(format!("tensor `{}`: {e}", entry.name)))?;
            tensors.push((entry.name.clone(), arr));
        }
        Ok(Self {
            epoch: header.epoch,
            iteration: header.iteration,
            extra: header.extra,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let t1 = ndarray::arr2(&[[1.0f64, -2.5e-300], [f64::MIN_POSITIVE, 3.1415926535897932]])
            .into_dyn();
        let t2 = ndarray::arr1(&[0.1f64, 0.2, 0.3]).into_dyn();
        let ck = Checkpoint {
            epoch: 7,
            iteration: 1234,
            extra: serde_json::json!({"seed": 42, "note": "x"}),
            tensors: vec![("a.w".into(), t1.clone()), ("b.b".into(), t2.clone())],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.iteration, 1234);
        assert_eq!(back.extra["seed"], 42);
        assert_eq!(back.tensor("a.w").unwrap(), &t1);
        assert_eq!(back.tensor("b.b").unwrap(), &t2);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointFormatError(_))
        ));
    }
}
