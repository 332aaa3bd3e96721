//! Binary container used for checkpoints and target caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "E2IC"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! count      u64      number of float32 values
//! payload    count * 4 bytes, little-endian f32
//! trailer    32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"E2IC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container<H> {
    pub header: H,
    pub payload: Vec<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<H: Serialize + DeserializeOwned> Container<H> {
    pub fn new(header: H, payload: Vec<f32>) -> Self {
        Container { header, payload }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::parse("container header", e))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 + self.payload.len() * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let truncated = || Error::parse(what, "truncated container");
        if bytes.len() < 4 + 4 + 8 + 8 + 32 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::parse(what, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::SchemaVersion {
                what: what.to_string(),
                found: version,
                supported: CONTAINER_VERSION,
            });
        }
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest.as_slice() != &bytes[body_len..] {
            return Err(Error::Integrity(what.to_string()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize.checked_add(header_len).ok_or_else(truncated)?;
        if header_end + 8 > body_len {
            return Err(truncated());
        }
        let header: H =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::parse(what, e))?;
        let count = u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap()) as usize;
        let payload_start = header_end + 8;
        if payload_start + count * 4 != body_len {
            return Err(truncated());
        }
        let payload = bytes[payload_start..body_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Container { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Hash of a header and payload without writing a file.
pub fn content_hash<H: Serialize>(header: &H, payload: &[f32]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(header).unwrap_or_default());
    for v in payload {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(payload in proptest::collection::vec(any::<f32>(), 0..64), tag in "[a-z]{0,8}") {
            let c = Container::new(tag.clone(), payload.clone());
            let back: Container<String> = Container::from_bytes(&c.to_bytes().unwrap(), "t").unwrap();
            prop_assert_eq!(back.header, tag);
            let a: Vec<u32> = payload.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.payload.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn detects_corruption_and_truncation() {
        let c = Container::new(vec![1u32, 2], vec![1.0, 2.0, 3.0]);
        let mut bytes = c.to_bytes().unwrap();
        let r: Result<Container<Vec<u32>>> = Container::from_bytes(&bytes[..bytes.len() - 5], "t");
        assert!(r.is_err());
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        let r: Result<Container<Vec<u32>>> = Container::from_bytes(&bytes, "t");
        assert!(matches!(r, Err(Error::Integrity(_))));
    }
}
