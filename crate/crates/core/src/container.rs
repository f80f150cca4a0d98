//! Binary container for named arrays, shared by checkpoints and precomputed
//! feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PDSC" | version u32 | entry count u32 |
//!   per entry: name len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u64 × rank | data
//! crc32 of all preceding bytes, u32
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = i64.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Data {
    fn tag(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::I64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::I64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Data,
}

impl Tensor {
    pub fn from_f64(a: ArrayD<f64>) -> Self {
        let shape = a.shape().to_vec();
        let data = a.as_standard_layout().iter().copied().collect();
        Self {
            shape,
            data: Data::F64(data),
        }
    }

    pub fn scalar_f64(v: f64) -> Self {
        Self {
            shape: vec![],
            data: Data::F64(vec![v]),
        }
    }

    pub fn i64s(v: Vec<i64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: Data::I64(v),
        }
    }

    pub fn scalar_i64(v: i64) -> Self {
        Self {
            shape: vec![],
            data: Data::I64(vec![v]),
        }
    }

    /// Values widened to f64.
    pub fn to_f64_array(&self) -> ArrayD<f64> {
        let v: Vec<f64> = match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
            Data::I64(v) => v.iter().map(|&x| x as f64).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), v).expect("shape validated on read")
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            Data::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Data::F64(v) => Some(v),
            _ => None,
        }
    }
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.data.tag());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            Data::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Data::I64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic bytes, not a PDSC container"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(r.fail("truncated header"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    r.buf = &bytes[..body_end];
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| {
                r.pos = start;
                r.fail("entry name is not UTF-8")
            })?
            .to_string();
        let tag = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match tag {
            0 => Data::F32(
                r.take(n * 4, "f32 data")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Data::F64(
                r.take(n * 8, "f64 data")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Data::I64(
                r.take(n * 8, "i64 data")?
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => {
                r.pos -= 2 + 8 * rank;
                return Err(r.fail(format!("unknown dtype tag {other} for '{name}'")));
            }
        };
        debug_assert_eq!(data.len(), n);
        out.push((name, Tensor { shape, data }));
    }
    if r.pos != body_end {
        return Err(r.fail(format!(
            "{} trailing bytes after last entry",
            body_end - r.pos
        )));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partially written container.
pub fn write_file(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let mut fname = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    fname.push(".tmp");
    tmp.set_file_name(fname);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
