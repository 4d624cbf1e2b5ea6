//! Binary container for named f64 tensors (little-endian):
//! magic "PSTB", u32 version, u32 entry count, then per entry
//! u32 name length + UTF-8 name, u32 ndim, u32 dims, f64 payload.
//! Used for encoder weight files and as the parameter section of
//! training checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: [u8; 4] = *b"PSTB";
pub const BUNDLE_VERSION: u32 = 1;

pub fn bundle_to_bytes(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub struct BundleReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BundleReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Numeric("tensor bundle truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, usize)> {
    let mut r = BundleReader::new(bytes);
    if r.take(4)? != BUNDLE_MAGIC {
        return Err(Error::Numeric("bad tensor bundle magic".into()));
    }
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(Error::Numeric(format!(
            "unsupported tensor bundle version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Numeric("bundle entry name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&shape, data)));
    }
    Ok((entries, r.pos))
}

pub fn write_bundle(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, bundle_to_bytes(entries))?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let (entries, _) = bundle_from_bytes(&bytes)?;
    Ok(entries)
}

/// Look up one entry by name.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Numeric(format!("missing tensor '{name}' in bundle")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_bits() {
        let entries = vec![
            ("a.weight".to_string(), Tensor::new(&[2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, 9.0])),
            ("b".to_string(), Tensor::scalar(42.0)),
        ];
        let bytes = bundle_to_bytes(&entries);
        let (back, used) = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, entries);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(bundle_from_bytes(b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").is_err());
    }
}
