//! The `MMRS` array container.
//!
//! Layout (little-endian): magic `MMRS`, version `u16`, then a sequence of
//! blocks until end of file. Each block is `name_len: u16`, the UTF-8 name,
//! `dtype: u8` (0 = f32, 1 = i32), `ndim: u8`, `ndim` dimensions as `u32`,
//! and the raw element bytes.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMRS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::I32(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        NamedArray {
            name: name.into(),
            dims,
            data: ArrayData::F32(data),
        }
    }

    pub fn i32(name: impl Into<String>, dims: Vec<usize>, data: Vec<i32>) -> Self {
        NamedArray {
            name: name.into(),
            dims,
            data: ArrayData::I32(data),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            ArrayData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            ArrayData::I32(v) => Some(v),
            ArrayData::F32(_) => None,
        }
    }
}

pub fn encode_container(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for a in arrays {
        let name = a.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::arg(format!("array name too long: {}", a.name)))?;
        let ndim = u8::try_from(a.dims.len()).map_err(|_| Error::arg("too many dimensions"))?;
        if a.dims.iter().product::<usize>() != a.data.len() {
            return Err(Error::dim(format!(
                "array {} dims {:?} disagree with its data",
                a.name, a.dims
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(a.data.dtype());
        out.push(ndim);
        for &d in &a.dims {
            let d = u32::try_from(d).map_err(|_| Error::arg("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &a.data {
            ArrayData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let mut arrays = Vec::new();
    while r.pos < bytes.len() {
        let block_start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                reason: "array name is not UTF-8".into(),
            })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype > 1 {
            return Err(Error::Format {
                offset: dtype_at,
                reason: format!("unknown dtype {dtype}"),
            });
        }
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dimension")? as usize);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format {
                offset: block_start,
                reason: format!("array {name} is too large"),
            })?;
        let raw = r.take(count * 4, "array data")?;
        let data = match dtype {
            0 => ArrayData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => ArrayData::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        arrays.push(NamedArray { name, dims, data });
    }
    Ok(arrays)
}
