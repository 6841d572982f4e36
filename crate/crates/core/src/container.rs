//! Binary container shared by checkpoints and dataset dumps: an 8-byte
//! magic, a little-endian `u64` manifest length, a JSON manifest, then
//! contiguous little-endian `f64` arrays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(magic: &[u8; 8], manifest: &str, arrays: &[&[f64]]) -> Vec<u8> {
    let total: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(16 + manifest.len() + 8 * total);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a container into its manifest and the flat payload.
pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(String, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::Persistence("bad magic header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Persistence("truncated manifest".into()));
    }
    let manifest = std::str::from_utf8(&body[..len])
        .map_err(|_| Error::Persistence("manifest is not utf-8".into()))?
        .to_string();
    let raw = &body[len..];
    if raw.len() % 8 != 0 {
        return Err(Error::Persistence("payload length is not a multiple of 8".into()));
    }
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((manifest, data))
}

pub fn write(path: &Path, magic: &[u8; 8], manifest: &str, arrays: &[&[f64]]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(magic, manifest, arrays))?;
    Ok(())
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<(String, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))?;
    decode(magic, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let m = b"TESTMAG1";
        let bytes = encode(m, "{\"a\":1}", &[&[1.0, -2.5], &[f64::MIN_POSITIVE]]);
        let (man, data) = decode(m, &bytes).unwrap();
        assert_eq!(man, "{\"a\":1}");
        assert_eq!(data, vec![1.0, -2.5, f64::MIN_POSITIVE]);
        assert!(decode(b"OTHERMAG", &bytes).is_err());
        assert!(decode(m, &bytes[..bytes.len() - 3]).is_err());
        assert!(decode(m, &bytes[..12]).is_err());
    }
}
