//! Binary checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `CRAPCNCK`, a format version
//! byte, the run configuration as UTF-8 text (`u32` length + bytes), a `u32`
//! parameter count, then per parameter: `u32` name length, name, `u32` rank,
//! `u64` per dimension, and the values as `f64`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"CRAPCNCK";
pub const VERSION: u8 = 1;

pub fn to_bytes<T: Real>(model: &Model<T>, run: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let text = run.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Rebuilds the model described by the stored configuration and fills in
/// every stored parameter.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(Model<T>, RunConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string("configuration")?;
    let run = RunConfig::parse(&text, "checkpoint configuration")?;
    let mut model = Model::new(run.model.clone(), 0)?;
    let count = r.u32("parameter count")?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model has {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u64("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .params()
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let expected = &model.params().get(id).shape;
        if &shape != expected {
            return Err(Error::Checkpoint(format!(
                "`{name}` stored as {shape:?}, model expects {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        model.params_mut().set(id, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((model, run))
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, run: &RunConfig) -> Result<()> {
    std::fs::write(path, to_bytes(model, run)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
