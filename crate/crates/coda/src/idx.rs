//! IDX files (the MNIST container format) holding unsigned bytes.

use std::fs;
use std::path::Path;

use coda_core::data::{Domain, DomainDataset};
use coda_core::Tensor;

use crate::error::{Error, Result};

const TYPE_U8: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("bad magic: leading bytes must be zero, found {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported element type 0x{0:02x} (only unsigned bytes)")]
    UnsupportedType(u8),
    #[error("file holds {found} bytes of data, header promises {expected}")]
    Length { expected: usize, found: usize },
    #[error("header truncated")]
    Truncated,
    #[error("{0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse(buf: &[u8]) -> Result<IdxArray, IdxError> {
    if buf.len() < 4 {
        return Err(IdxError::Truncated);
    }
    if buf[0] != 0 || buf[1] != 0 {
        return Err(IdxError::BadMagic([buf[0], buf[1]]));
    }
    if buf[2] != TYPE_U8 {
        return Err(IdxError::UnsupportedType(buf[2]));
    }
    let rank = buf[3] as usize;
    let header = 4 + 4 * rank;
    if buf.len() < header {
        return Err(IdxError::Truncated);
    }
    let dims: Vec<usize> = buf[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected = dims.iter().product();
    let data = &buf[header..];
    if data.len() != expected {
        return Err(IdxError::Length {
            expected,
            found: data.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: data.to_vec(),
    })
}

pub fn encode(a: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, TYPE_U8, a.dims.len() as u8];
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    out
}

pub fn read(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|source| Error::Idx {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, a: &IdxArray) -> Result<()> {
    fs::write(path, encode(a)).map_err(|e| Error::io(path, e))
}

/// Images `[n, h, w]` or `[n, h, w, c]` become `[n, c, h, w]` scaled to
/// [0, 1]; grayscale is replicated when `channels` asks for more.
pub fn images_to_tensor(a: &IdxArray, channels: Option<usize>) -> Result<Tensor, IdxError> {
    let (n, h, w, c) = match a.dims[..] {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(IdxError::Layout(format!("images need rank 3 or 4, got {:?}", a.dims))),
    };
    let out_c = channels.unwrap_or(c);
    if out_c != c && c != 1 {
        return Err(IdxError::Layout(format!("cannot map {c} channels to {out_c}")));
    }
    let mut data = vec![0.0; n * out_c * h * w];
    for s in 0..n {
        for k in 0..out_c {
            let src_k = if c == 1 { 0 } else { k };
            for y in 0..h {
                for x in 0..w {
                    let v = a.data[((s * h + y) * w + x) * c + src_k];
                    data[((s * out_c + k) * h + y) * w + x] = v as f64 / 255.0;
                }
            }
        }
    }
    Tensor::new(vec![n, out_c, h, w], data).map_err(|e| IdxError::Layout(e.to_string()))
}

pub fn labels_to_vec(a: &IdxArray) -> Result<Vec<usize>, IdxError> {
    if a.dims.len() != 1 {
        return Err(IdxError::Layout(format!("labels need rank 1, got {:?}", a.dims)));
    }
    Ok(a.data.iter().map(|&b| b as usize).collect())
}

/// Loads an image file and optional label file as one domain.
pub fn load_domain(
    images: &Path,
    labels: Option<&Path>,
    domain: Domain,
    classes: usize,
    channels: Option<usize>,
) -> Result<DomainDataset> {
    let wrap = |path: &Path, source| Error::Idx {
        path: path.to_path_buf(),
        source,
    };
    let x = images_to_tensor(&read(images)?, channels).map_err(|e| wrap(images, e))?;
    let y = match labels {
        Some(p) => Some(labels_to_vec(&read(p)?).map_err(|e| wrap(p, e))?),
        None => None,
    };
    Ok(DomainDataset::new(x, y, domain, classes)?)
}
