//! Named-parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NRCK" | u32 version = 1 | u32 param count
//! per param: u16 name length | name bytes (UTF-8)
//!            u32 rank | u32 dim × rank | f64 LE × ∏dims
//! ```
//!
//! Parameters are written in `ParamSet` order and read back in file order,
//! so a save/load round trip preserves both values (bit-exactly) and the
//! ordering that Adam state and model wiring depend on.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nncore::tape::ParamSet;
use crate::nncore::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NRCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "parameter name `{}…` too long to checkpoint",
                &p.name[..32]
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let [rows, cols] = p.value.shape();
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &x in p.value.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32("param count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank != 2 {
            return Err(Error::Format(format!(
                "parameter `{name}` has rank {rank}, expected 2"
            )));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64("values")?);
        }
        params.add(&name, Tensor::from_vec(rows, cols, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last checkpoint parameter",
            buf.len() - r.pos
        )));
    }
    Ok(params)
}
