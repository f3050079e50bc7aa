//! IDX container: big-endian header followed by an unsigned-byte payload.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Element type code for unsigned bytes, the only type supported.
pub const TYPE_U8: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Idx(format!("unsupported number of dims {}", dims.len())));
        }
        if dims.iter().any(|&s| s > u32::MAX as usize) {
            return Err(Error::Idx("dimension exceeds 32 bits".into()));
        }
        let expected = element_count(&dims)?;
        if payload.len() != expected {
            return Err(Error::Idx(format!(
                "payload has {} bytes, dims require {expected}",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn magic(&self) -> [u8; 4] {
        [0, 0, TYPE_U8, self.dims.len() as u8]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic());
        for &s in &self.dims {
            out.extend_from_slice(&(s as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_idx(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Flattens each item along the first axis into one row, scaling pixels
    /// to `[0, 1]`.
    pub fn images(&self) -> Array2<f64> {
        let n = self.dims[0];
        let width = self.dims[1..].iter().product::<usize>();
        let values = self.payload.iter().map(|&b| b as f64 / 255.0).collect();
        Array2::from_shape_vec((n, width), values).expect("payload length checked")
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::Idx("element count overflows".into()))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Idx(format!("file too short for magic ({} bytes)", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Idx(format!(
            "bad magic {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    if bytes[2] != TYPE_U8 {
        return Err(Error::Idx(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::Idx("zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Idx(format!(
            "truncated header: need {header} bytes, have {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = element_count(&dims)?;
    let have = bytes.len() - header;
    if have < expected {
        return Err(Error::Idx(format!(
            "truncated payload: need {expected} bytes, have {have}"
        )));
    }
    if have > expected {
        return Err(Error::Idx(format!("{} trailing bytes after payload", have - expected)));
    }
    IdxTensor::new(dims, bytes[header..].to_vec())
}
