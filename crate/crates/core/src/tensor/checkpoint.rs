//! `MMF1` parameter checkpoints.
//!
//! Layout (little-endian): magic `MMF1`, version `u32`, count `u32`, then per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, dims as `u32`, and the
//! `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMF1";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected MMF1"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32("count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        store
            .insert(name, t)
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last parameter"));
    }
    Ok(store)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(std::fs::File::open(path)?)
}
