//! Binary named-tensor container used for model checkpoints.
//!
//! Layout, all little-endian: magic "MVGB", format version u32, tensor count
//! u32, then per tensor: name length u32, UTF-8 name, ndim u32, dims u32 each,
//! payload f32s in row-major order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVGB";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let expect: usize = t.dims.iter().product();
        if expect != t.data.len() {
            return Err(Error::shape(format!(
                "tensor '{}': dims {:?} disagree with {} elements",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("bad magic: not a checkpoint file"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = c.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32("dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    if c.pos != buf.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after last tensor",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}
