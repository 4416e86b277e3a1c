//! Small file helpers shared by the artifact formats.
//!
//! Binary artifacts (flow models, feature matrices) use one framing:
//! a magic line, a little-endian `u64` header length, a JSON header, then a
//! payload of little-endian `f64` values (plus whatever trailing bytes the
//! format defines).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Frames a JSON header and an `f64` payload behind `magic`.
pub fn encode_framed<H: Serialize>(magic: &str, header: &H, payload: &[f64], trailer: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(magic.len() + 9 + header.len() + payload.len() * 8 + trailer.len());
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(trailer);
    Ok(out)
}

/// Inverse of [`encode_framed`]: returns the header and the raw bytes after it.
pub fn decode_framed<'a, H: DeserializeOwned>(magic: &str, bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let bad = |what: &str| Error::Schema(format!("{magic}: {what}"));
    let m = magic.len();
    if bytes.len() < m + 9 || &bytes[..m] != magic.as_bytes() || bytes[m] != b'\n' {
        return Err(bad("bad magic"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[m + 1..m + 9]);
    let len = u64::from_le_bytes(len) as usize;
    let start = m + 9;
    let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header = serde_json::from_slice(&bytes[start..end])?;
    Ok((header, &bytes[end..]))
}

/// Reads `count` little-endian `f64`s from the front of `bytes`.
pub fn take_f64s(bytes: &[u8], count: usize) -> Result<(Vec<f64>, &[u8])> {
    let need = count * 8;
    if bytes.len() < need {
        return Err(Error::Schema(format!("payload holds {} bytes, expected at least {need}", bytes.len())));
    }
    let values = bytes[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((values, &bytes[need..]))
}

/// Serializes records as one JSON document per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Schema(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framed_roundtrip() {
        let bytes = encode_framed("TEST-1", &vec![1u32, 2], &[1.5, -0.25], b"xy").unwrap();
        let (h, rest): (Vec<u32>, _) = decode_framed("TEST-1", &bytes).unwrap();
        assert_eq!(h, vec![1, 2]);
        let (vals, rest) = take_f64s(rest, 2).unwrap();
        assert_eq!(vals, vec![1.5, -0.25]);
        assert_eq!(rest, b"xy");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = encode_framed("A-1", &0u8, &[], &[]).unwrap();
        assert!(decode_framed::<u8>("B-1", &bytes).is_err());
    }
}
