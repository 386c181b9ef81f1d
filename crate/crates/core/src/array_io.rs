//! Raw array files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"UEAR"
//! dtype   4 bytes  b"f64<"   (IEEE-754 binary64, little-endian)
//! ndim    u32
//! dims    ndim x u64
//! data    prod(dims) x f64, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UEAR";
const DTYPE_F64_LE: &[u8; 4] = b"f64<";

pub fn encode(array: &ArrayD<f64>) -> Vec<u8> {
    let shape = array.shape();
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + 8 * array.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(DTYPE_F64_LE);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let shape = decode_header(bytes)?;
    let header_len = 12 + 8 * shape.len();
    let count: usize = shape.iter().product();
    let body = &bytes[header_len..];
    if body.len() != 8 * count {
        return Err(Error::Validation(format!(
            "array body holds {} bytes, shape {:?} needs {}",
            body.len(),
            shape,
            8 * count
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Parses only the header and returns the stored shape.
pub fn decode_header(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Validation("not a UEAR array file".into()));
    }
    if &bytes[4..8] != DTYPE_F64_LE {
        return Err(Error::Validation(format!(
            "unsupported dtype tag {:?}",
            String::from_utf8_lossy(&bytes[4..8])
        )));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + 8 * ndim {
        return Err(Error::Validation("truncated array header".into()));
    }
    Ok((0..ndim)
        .map(|i| {
            let at = 12 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect())
}

pub fn write(path: impl AsRef<Path>, array: &ArrayD<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 12];
    file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let ndim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut dims = vec![0u8; 8 * ndim];
    file.read_exact(&mut dims).map_err(|e| Error::io(path, e))?;
    head.extend_from_slice(&dims);
    decode_header(&head)
}
