//! Checkpoint layout: `PCKP`, version byte, u32 length + backbone config as
//! key-value text, u32 parameter count, then per parameter a u32 name
//! length, the UTF-8 name, a u64 value count and little-endian f64 values.

use std::fs;
use std::path::Path;

use super::backbone::{Backbone, BackboneConfig, ParamSet};
use crate::error::{Error, Result};
use crate::kv::KvMap;

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u8 = 1;

pub fn encode(model: &Backbone) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let cfg = model.config().to_kv().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.names.len() as u32).to_le_bytes());
    for (name, values) in params.names.iter().zip(&params.values) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Backbone> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = c.u32()? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?)
        .map_err(|e| Error::Parse(format!("config block: {e}")))?;
    let config = BackboneConfig::from_kv(&KvMap::parse(cfg_text)?)?;
    let count = c.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Parse(format!("parameter name: {e}")))?
            .to_string();
        let n = c.u64()? as usize;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Parse("length overflow".into()))?)?;
        values.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
        names.push(name);
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    Backbone::from_params(config, ParamSet { names, values })
}

pub fn save(model: &Backbone, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Backbone> {
    decode(&fs::read(path)?)
}
