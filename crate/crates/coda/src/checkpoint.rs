//! Binary checkpoint files.
//!
//! Layout (little-endian): `b"CODA"`, format version `u32`, iteration `u64`,
//! entry count `u64`, then per entry: name length `u32`, UTF-8 name, dtype
//! tag `u8` (0 = f64, 2 = u64), rank `u32`, `rank` dims as `u64`, raw values.

use std::fs;
use std::path::Path;

use coda_core::state::{ArrayData, NamedArray};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CODA";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { found: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("entry `{name}`: unknown dtype tag {tag}")]
    BadDtype { name: String, tag: u8 },
    #[error("entry `{name}`: dims {dims:?} do not describe {len} values")]
    BadDims { name: String, dims: Vec<u64>, len: usize },
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub arrays: Vec<NamedArray>,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out.extend_from_slice(&(ckpt.arrays.len() as u64).to_le_bytes());
    for a in &ckpt.arrays {
        let count: usize = a.shape.iter().product();
        if count != a.data.len() {
            return Err(CheckpointError::BadDims {
                name: a.name.clone(),
                dims: a.shape.iter().map(|&d| d as u64).collect(),
                len: a.data.len(),
            });
        }
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(match a.data {
            ArrayData::F64(_) => DTYPE_F64,
            ArrayData::U64(_) => DTYPE_U64,
        });
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &a.data {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }
    let iteration = r.u64("iteration")?;
    let count = r.u64("entry count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let tag = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        let dims: Vec<u64> = (0..rank).map(|_| r.u64("dims")).collect::<Result<_, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?));
        let n = n.ok_or_else(|| CheckpointError::BadDims {
            name: name.clone(),
            dims: dims.clone(),
            len: 0,
        })?;
        let bytes = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated { what: "values" })?, "values")?;
        let words = bytes.chunks_exact(8).map(|c| c.try_into().unwrap());
        let data = match tag {
            DTYPE_F64 => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
            DTYPE_U64 => ArrayData::U64(words.map(u64::from_le_bytes).collect()),
            _ => return Err(CheckpointError::BadDtype { name, tag }),
        };
        arrays.push(NamedArray {
            name,
            shape: dims.iter().map(|&d| d as usize).collect(),
            data,
        });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Trailing(buf.len() - r.pos));
    }
    Ok(Checkpoint { iteration, arrays })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            iteration: 42,
            arrays: vec![
                NamedArray::f64("param/w", &[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0]),
                NamedArray::u64("rng/vat/0", vec![u64::MAX, 0, 7]),
                NamedArray::f64("adam/cls/m/b", &[], vec![0.5]),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let ArrayData::F64(v) = &back.arrays[0].data else { panic!() };
        assert_eq!(v[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample()).unwrap();
        assert_eq!(&b[..4], b"CODA");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 42);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 7);
        assert_eq!(&b[28..35], b"param/w");
        assert_eq!(b[35], DTYPE_F64);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(decode(&bad), Err(CheckpointError::BadVersion { found: 9 }));
        for cut in [2, 10, 30, good.len() - 1] {
            assert!(matches!(decode(&good[..cut]), Err(CheckpointError::Truncated { .. })), "cut {cut}");
        }
        let mut bad = good.clone();
        bad[35] = 1;
        assert!(matches!(decode(&bad), Err(CheckpointError::BadDtype { tag: 1, .. })));
        let mut long = good;
        long.push(0);
        assert_eq!(decode(&long), Err(CheckpointError::Trailing(1)));
    }

    #[test]
    fn inconsistent_shape_is_rejected_on_encode() {
        let c = Checkpoint {
            iteration: 0,
            arrays: vec![NamedArray::f64("x", &[2, 2], vec![1.0])],
        };
        assert!(matches!(encode(&c), Err(CheckpointError::BadDims { .. })));
    }
}
