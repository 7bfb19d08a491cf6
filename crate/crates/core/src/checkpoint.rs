//! Binary checkpoint of a [`Forecaster`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "GRIDCAST"
//! version    u32
//! config_len u64, then that many bytes of canonical ModelConfig JSON
//! count      u64
//! count × { ndim u32, dims ndim × u64, data Π(dims) × f64 }
//! ```
//!
//! Tensors follow the model's parameter order; the standardiser's mean and
//! scale vectors come last.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::json::to_canonical_json;
use crate::model::{model_from_tensors, ModelConfig};
use crate::params::Parameters;
use crate::scaling::Standardizer;
use crate::training::Forecaster;

pub const MAGIC: &[u8; 8] = b"GRIDCAST";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any length field, so a corrupt header cannot trigger a
/// huge allocation.
const MAX_LEN: u64 = 1 << 32;

fn put_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(f: &Forecaster) -> Result<Vec<u8>> {
    let config = to_canonical_json(f.model.config())?;
    let tensors = f.model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64 + 2).to_le_bytes());
    for t in &tensors {
        put_tensor(&mut out, &t.shape, t.data);
    }
    put_tensor(&mut out, &[f.scaler.dim()], f.scaler.mean());
    put_tensor(&mut out, &[f.scaler.dim()], f.scaler.scale());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if v > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let ndim = self.u32("tensor rank")? as usize;
        if ndim > 4 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.len("tensor dim")).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c as u64 <= MAX_LEN)
            .ok_or_else(|| Error::Checkpoint(format!("implausible tensor shape {shape:?}")))?;
        let raw = self.take(count * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Forecaster> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a gridcast checkpoint (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config_len = cur.len("config length")?;
    let cfg: ModelConfig = serde_json::from_slice(cur.take(config_len, "config")?)?;
    let count = cur.len("tensor count")?;
    if count < 2 {
        return Err(Error::Checkpoint("checkpoint has no scaler tensors".into()));
    }
    let mut tensors = (0..count).map(|_| cur.tensor()).collect::<Result<Vec<_>>>()?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    let (_, scale) = tensors.pop().unwrap();
    let (_, mean) = tensors.pop().unwrap();
    if mean.len() != cfg.input_dim {
        return Err(Error::Checkpoint(format!(
            "scaler width {} does not match input_dim {}",
            mean.len(),
            cfg.input_dim
        )));
    }
    Ok(Forecaster {
        model: model_from_tensors(&cfg, tensors)?,
        scaler: Standardizer::from_parts(mean, scale)?,
    })
}

pub fn write_checkpoint<W: Write>(f: &Forecaster, mut w: W) -> Result<()> {
    w.write_all(&encode(f)?)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Forecaster> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(f: &Forecaster, path: &Path) -> Result<()> {
    std::fs::write(path, encode(f)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Forecaster> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture};

    fn sample(arch: Architecture) -> Forecaster {
        let mut cfg = ModelConfig::standard(arch, 4, 3, 6, 2, 11);
        cfg.depth = 2;
        if let Some(c) = cfg.conv.as_mut() {
            c.filters = 2;
            c.kernel = 3;
        }
        Forecaster {
            model: build_model(&cfg).unwrap(),
            scaler: Standardizer::from_parts(vec![0.1, 0.2, -0.3, 1.0], vec![1.0, 0.5, 2.0, 3.0]).unwrap(),
        }
    }

    #[test]
    fn round_trip_every_architecture() {
        for arch in Architecture::ALL {
            let f = sample(arch);
            let bytes = encode(&f).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, f);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample(Architecture::Rnn)).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[20..20 + len]).unwrap();
        assert!(json.starts_with("{\"architecture\":\"rnn\""), "{json}");
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(&sample(Architecture::Gru)).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Checkpoint(_))));
        assert!(decode(b"").is_err());
    }
}
