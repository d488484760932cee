//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCD1"                      magic
//! u32                         format version (1)
//! u32                         entry count
//! per entry:
//!   u32 + bytes               name length and UTF-8 name
//!   u32 + u64 × ndim          rank and dimensions
//!   u64                       payload offset of the first value, in bytes
//! f64 × total                 payload, row-major, entries in manifest order
//! u64                         first 8 bytes of SHA-256(payload), as LE u64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use dcd_core::zoo::Model;
use dcd_core::Tensor;
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"DCD1";
pub const VERSION: u32 = 1;

#[derive(Debug, PartialEq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    /// Header is cut short or inconsistent.
    Malformed(String),
    ChecksumMismatch {
        stored: u64,
        computed: u64,
    },
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    MissingTensor(String),
    Io(String),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadMagic => write!(f, "not a checkpoint: bad magic bytes"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            Self::Malformed(m) => write!(f, "malformed checkpoint header: {m}"),
            Self::ChecksumMismatch { stored, computed } => {
                write!(f, "checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")
            }
            Self::ShapeMismatch { name, stored, expected } => {
                write!(
                    f,
                    "shape mismatch for tensor {name}: checkpoint has {stored:?}, model expects {expected:?}"
                )
            }
            Self::MissingTensor(n) => write!(f, "checkpoint has no tensor {n}"),
            Self::Io(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn checksum(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in entries {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for d in t.shape() {
            head.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&payload);
    head.extend_from_slice(&payload);
    head.extend_from_slice(&sum.to_le_bytes());
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("header ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a checkpoint, returning tensors in manifest order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        manifest.push(ManifestEntry { name, shape, offset });
    }
    let start = r.pos;
    let mut expected = 0u64;
    for e in &manifest {
        if e.offset != expected {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} starts at {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let numel = e.shape.iter().try_fold(1u64, |a, d| a.checked_mul(*d as u64));
        expected = numel
            .and_then(|n| n.checked_mul(8))
            .and_then(|b| b.checked_add(expected))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {} is too large", e.name)))?;
    }
    // a short file shows up as a payload whose hash disagrees with the trailer
    let available = bytes.len() - start;
    let (payload, stored) = if available as u64 == expected + 8 {
        let p = &bytes[start..start + expected as usize];
        let s = u64::from_le_bytes(bytes[start + expected as usize..].try_into().expect("8 bytes"));
        (p, s)
    } else if (available as u64) < expected + 8 {
        let cut = available.saturating_sub(8);
        let s = if available >= 8 {
            u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"))
        } else {
            0
        };
        return Err(CheckpointError::ChecksumMismatch {
            stored: s,
            computed: checksum(&bytes[start..start + cut]),
        });
    } else {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            available as u64 - expected - 8
        )));
    };
    let computed = checksum(payload);
    if computed != stored {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let off = e.offset as usize;
        let data = payload[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Malformed(format!("{}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save_model(model: &Model) -> Vec<u8> {
    encode(&model.state_entries())
}

/// Loads a checkpoint into `model`, checking every expected tensor's shape
/// in the model's own order before anything is modified.
pub fn load_into(model: &mut Model, bytes: &[u8]) -> Result<(), CheckpointError> {
    let entries: BTreeMap<String, Tensor> = decode(bytes)?.into_iter().collect();
    for (name, t) in model.state_entries() {
        match entries.get(&name) {
            None => return Err(CheckpointError::MissingTensor(name)),
            Some(v) if v.shape() != t.shape() => {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    stored: v.shape().to_vec(),
                    expected: t.shape().to_vec(),
                })
            }
            _ => {}
        }
    }
    model.load_state(&entries).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn write_file(path: &Path, model: &Model) -> std::io::Result<()> {
    std::fs::write(path, save_model(model))
}

pub fn read_file(path: &Path, model: &mut Model) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("reading {}: {e}", path.display())))?;
    load_into(model, &bytes)
}
