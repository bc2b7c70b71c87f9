//! Columnar binary cache and key/value manifests.
//!
//! Cache layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `RULCACHE`               |
//! | 8      | 4    | format version (`u32`, = 1)    |
//! | 12     | 8    | row count (`u64`)              |
//! | 20     | 8    | column count (`u64`)           |
//! | 28     | 8·r·c| `f64` values, row-major        |
//!
//! A manifest is a UTF-8 text file of `key=value` lines; lines starting with
//! `#` are comments. Keys keep insertion order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CACHE_MAGIC: &[u8; 8] = b"RULCACHE";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated cache header".into());
    }
    if &bytes[..8] != CACHE_MAGIC {
        return Err("bad cache magic".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or("cache dimensions overflow")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format!(
            "cache payload is {} bytes, header promises {expected}",
            payload.len()
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|message| Error::Data {
        path: path.to_path_buf(),
        message,
    })
}

/// Ordered `key=value` record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Self { entries }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matrix_round_trips(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin())
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            prop_assert_eq!(decode_matrix(&encode_matrix(&m)).unwrap(), m);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_matrix(&Matrix::from_vec(1, 2, vec![1.0, -2.0]));
        assert_eq!(&bytes[..8], b"RULCACHE");
        assert_eq!(bytes[8..12], 1u32.to_le_bytes());
        assert_eq!(bytes[12..20], 1u64.to_le_bytes());
        assert_eq!(bytes[20..28], 2u64.to_le_bytes());
        assert_eq!(bytes[28..36], 1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 44);
    }

    #[test]
    fn rejects_corrupt_payloads() {
        let mut bytes = encode_matrix(&Matrix::zeros(2, 2));
        bytes.pop();
        assert!(decode_matrix(&bytes).is_err());
        let mut bad = encode_matrix(&Matrix::zeros(1, 1));
        bad[0] = b'X';
        assert!(decode_matrix(&bad).is_err());
    }

    #[test]
    fn manifest_replaces_and_parses() {
        let mut m = Manifest::new();
        m.set("a", 1).set("b", "two").set("a", 3);
        let text = m.to_text();
        assert_eq!(text, "a=3\nb=two\n");
        assert_eq!(Manifest::parse(&format!("# comment\n{text}")), m);
    }
}
