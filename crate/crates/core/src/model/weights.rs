//! Binary weight files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "TESLWTS\0" | version | len, fingerprint (utf-8)
//! count | count × ( len, name | rank | dims… | f32 values… )
//! ```
//!
//! Entries cover every parameter, running statistics included, in registry
//! order.

use std::path::Path;

use thiserror::Error;

use super::TeslNet;
use crate::error::{Error as CrateError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"TESLWTS\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weight file truncated at byte {0}")]
    Truncated(usize),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("architecture fingerprint mismatch: network {expected}, file {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("parameter {name}: shape {found:?} in file, {expected:?} in network")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from weight file")]
    Missing(String),
    #[error("weight file has unknown parameter {0}")]
    Unknown(String),
    #[error("trailing bytes after entry table at byte {0}")]
    TrailingBytes(usize),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn save_weights<T: Real>(net: &TeslNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_str(&mut out, &net.config.fingerprint());
    put_u32(&mut out, net.params.len());
    for (_, p) in net.params.iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f32().expect("finite cast").to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(WeightsError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String, WeightsError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WeightsError::Malformed("non-utf8 string".into()))
    }
}

/// Parsed file contents: fingerprint and `(name, tensor)` entries.
pub struct WeightFile {
    pub fingerprint: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

pub fn parse_weights(bytes: &[u8]) -> Result<WeightFile, WeightsError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| WeightsError::BadMagic)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let fingerprint = r.string()?;
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightsError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| WeightsError::Malformed(e.to_string()))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(r.pos));
    }
    Ok(WeightFile { fingerprint, entries })
}

/// Replaces every parameter of `net` with the file contents. Nothing is
/// modified unless the whole file is valid for this network.
pub fn load_weights<T: Real>(net: &mut TeslNet<T>, bytes: &[u8]) -> Result<(), WeightsError> {
    let file = parse_weights(bytes)?;
    let expected = net.config.fingerprint();
    if file.fingerprint != expected {
        return Err(WeightsError::FingerprintMismatch {
            expected,
            found: file.fingerprint,
        });
    }
    let mut staged = Vec::with_capacity(file.entries.len());
    for (name, t) in &file.entries {
        let id = net.params.id_of(name).ok_or_else(|| WeightsError::Unknown(name.clone()))?;
        let current = net.params.get(id).value.shape();
        if current != t.shape() {
            return Err(WeightsError::ShapeMismatch {
                name: name.clone(),
                expected: current.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        staged.push((id, t.cast::<T>()));
    }
    if staged.len() != net.params.len() {
        let present: std::collections::HashSet<_> = file.entries.iter().map(|(n, _)| n.as_str()).collect();
        let missing = net
            .params
            .iter()
            .find(|(_, p)| !present.contains(p.name.as_str()))
            .map(|(_, p)| p.name.clone())
            .unwrap_or_default();
        return Err(WeightsError::Missing(missing));
    }
    net.params.apply_updates(staged);
    Ok(())
}

pub fn save_weights_file<T: Real>(net: &TeslNet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, save_weights(net)).map_err(|e| CrateError::io(path, e))
}

pub fn load_weights_file<T: Real>(net: &mut TeslNet<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| CrateError::io(path, e))?;
    Ok(load_weights(net, &bytes)?)
}
