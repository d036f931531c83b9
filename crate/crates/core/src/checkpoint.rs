//! Binary checkpoints: magic, version, the config as TOML, then every named
//! parameter with its shape and little-endian f64 values.

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"V2PCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &Config, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = cfg.to_toml();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)));
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

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Config, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg = Config::from_toml(&r.string(n)?)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let ndim = r.u32()?;
        if ndim != 2 {
            return Err(Error::Checkpoint(format!("{name}: expected 2 dims, found {ndim}")));
        }
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let len = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.insert(name, Tensor::from_vec(rows, cols, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((cfg, store))
}

pub fn save(path: &Path, cfg: &Config, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(cfg, store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Config, ParamStore)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
