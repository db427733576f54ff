//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   b"STFCKPT\0"
//! version          u32       FORMAT_VERSION
//! precision        u8        32 or 64
//! manifest_len     u64
//! manifest         JSON      {config, entries: [{name, shape, offset}], payload_len, payload_sha256}
//! payload          raw LE values, one blob per entry at its byte offset
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamSet, Precision, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: serde_json::Value,
    entries: Vec<Entry>,
    payload_len: u64,
    payload_sha256: String,
}

/// Named tensors plus a free-form configuration record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<S>)>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl<S: Real> Checkpoint<S> {
    pub fn new(config: serde_json::Value) -> Self {
        Self { config, tensors: Vec::new() }
    }

    /// Appends every tensor of `set`, prefixing names with `prefix`.
    pub fn add_params(&mut self, prefix: &str, set: &ParamSet<S>) {
        for (name, t) in set.iter() {
            let plain = Tensor::new(t.shape(), t.data().to_vec()).expect("valid shape");
            self.tensors.push((format!("{prefix}{name}"), plain));
        }
    }

    /// Copies values into `set` for every `prefix`ed entry; names and shapes
    /// must match exactly.
    pub fn restore_params(&self, prefix: &str, set: &mut ParamSet<S>) -> Result<()> {
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let key = format!("{prefix}{name}");
            let (_, src) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {key}")))?;
            let dst = set.get_mut(set.set_id(i));
            if src.shape() != dst.shape() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?} in the checkpoint but {:?} in the model",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = S::PRECISION.bytes();
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
            payload.reserve(t.len() * width);
            t.data().iter().for_each(|v| v.write_le(&mut payload));
        }
        let manifest = Manifest {
            config: self.config.clone(),
            entries,
            payload_len: payload.len() as u64,
            payload_sha256: sha256_hex(&payload),
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(21 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(S::PRECISION.flag());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = bytes.get(..21).ok_or_else(|| Error::Corruption("checkpoint header truncated".into()))?;
        if &header[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let precision = Precision::from_flag(header[12])
            .ok_or_else(|| Error::Format(format!("unknown precision flag {}", header[12])))?;
        if precision != S::PRECISION {
            return Err(Error::Format(format!(
                "checkpoint stores {precision} values but the session runs in {}",
                S::PRECISION
            )));
        }
        let manifest_len = u64::from_le_bytes(header[13..21].try_into().expect("8 bytes")) as usize;
        let manifest_end = 21usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Corruption("checkpoint manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[21..manifest_end])
            .map_err(|e| Error::Corruption(format!("checkpoint manifest unreadable: {e}")))?;
        let payload = &bytes[manifest_end..];
        if payload.len() as u64 != manifest.payload_len {
            return Err(Error::Corruption(format!(
                "checkpoint payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_len
            )));
        }
        if sha256_hex(payload) != manifest.payload_sha256 {
            return Err(Error::Corruption("checkpoint payload hash mismatch".into()));
        }
        let width = precision.bytes();
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let blob = start
                .checked_add(count * width)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| Error::Corruption(format!("tensor {} lies outside the payload", e.name)))?;
            let data = blob.chunks_exact(width).map(S::read_le).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| Error::Corruption(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self { config: manifest.config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let mut c = Checkpoint::new(serde_json::json!({"layers": 3}));
        c.tensors.push(("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()));
        c.tensors.push(("b".into(), Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::<f64>::from_bytes(truncated), Err(Error::Corruption(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes[..10]), Err(Error::Corruption(_))));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&flipped), Err(Error::Corruption(_))));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad_version), Err(Error::Format(_))));

        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
