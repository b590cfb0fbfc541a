//! Keyed pseudorandom permutation of the 128-bit identifier space.
//!
//! An eight-round balanced Feistel network over two 64-bit halves, with a
//! SHA-256 round function keyed by the 256-bit secret. A Feistel network is a
//! bijection for any round function, so distinct identifiers never collide,
//! and the same key always maps the same identifier to the same label.

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::ingest::Addr;
use crate::matrix::TrafficMatrix;

const ROUNDS: u8 = 8;

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("key must be 32 bytes (64 hex characters), got {0} bytes")]
    Length(usize),
    #[error("key is not valid hex: {0}")]
    Hex(#[from] hex::FromHexError),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("cannot read key file: {0}")]
    Io(#[from] std::io::Error),
}

/// 256-bit anonymization secret.
#[derive(Clone, PartialEq, Eq)]
pub struct AnonymizationKey([u8; 32]);

impl fmt::Debug for AnonymizationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AnonymizationKey(..)")
    }
}

impl AnonymizationKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn from_hex(text: &str) -> Result<Self, KeyError> {
        let raw = hex::decode(text.trim())?;
        let bytes: [u8; 32] = raw.as_slice().try_into().map_err(|_| KeyError::Length(raw.len()))?;
        Ok(Self(bytes))
    }

    /// Reads a hex-encoded key from the named environment variable.
    pub fn from_env(var: &str) -> Result<Self, KeyError> {
        let text = std::env::var(var).map_err(|_| KeyError::MissingEnv(var.to_string()))?;
        Self::from_hex(&text)
    }

    /// Accepts either 32 raw bytes or 64 hex characters.
    pub fn from_file(path: &Path) -> Result<Self, KeyError> {
        let raw = std::fs::read(path)?;
        if let Ok(bytes) = <[u8; 32]>::try_from(raw.as_slice()) {
            if !bytes.iter().all(u8::is_ascii_hexdigit) {
                return Ok(Self(bytes));
            }
        }
        Self::from_hex(&String::from_utf8_lossy(&raw))
    }
}

/// The permutation `π_k` for one key.
#[derive(Clone)]
pub struct KeyedPermutation {
    keyed: Sha256,
}

impl KeyedPermutation {
    pub fn new(key: &AnonymizationKey) -> Self {
        Self {
            keyed: Sha256::new_with_prefix(key.0),
        }
    }

    fn round(&self, i: u8, half: u64) -> u64 {
        let mut h = self.keyed.clone();
        h.update([i]);
        h.update(half.to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }

    pub fn permute(&self, id: Addr) -> Addr {
        let (mut l, mut r) = ((id >> 64) as u64, id as u64);
        for i in 0..ROUNDS {
            (l, r) = (r, l ^ self.round(i, r));
        }
        ((l as u128) << 64) | r as u128
    }

    pub fn invert(&self, label: Addr) -> Addr {
        let (mut l, mut r) = ((label >> 64) as u64, label as u64);
        for i in (0..ROUNDS).rev() {
            (l, r) = (r ^ self.round(i, l), l);
        }
        ((l as u128) << 64) | r as u128
    }
}

/// Relabels every source and destination with the keyed permutation.
pub fn anonymize(m: &TrafficMatrix, key: &AnonymizationKey) -> TrafficMatrix {
    let p = KeyedPermutation::new(key);
    m.relabel(|a| p.permute(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{aggregates, degree_vectors};
    use proptest::prelude::*;

    fn key(b: u8) -> AnonymizationKey {
        AnonymizationKey::from_bytes([b; 32])
    }

    #[test]
    fn permutation_inverts() {
        let p = KeyedPermutation::new(&key(7));
        for id in [0, 1, 4, 8, u64::MAX as u128, u128::MAX, 1 << 100] {
            assert_eq!(p.invert(p.permute(id)), id);
        }
    }

    #[test]
    fn relabels_entries_keeping_counts() {
        let k = key(3);
        let p = KeyedPermutation::new(&k);
        let m = TrafficMatrix::from_entries([(4, 8, 2)], 0, (0, 0), None).unwrap();
        let a = anonymize(&m, &k);
        assert_eq!(a.entries(), &[(p.permute(4), p.permute(8), 2)]);
    }

    #[test]
    fn deterministic_across_windows_and_key_dependent() {
        let p1 = KeyedPermutation::new(&key(1));
        let p1b = KeyedPermutation::new(&key(1));
        let p2 = KeyedPermutation::new(&key(2));
        assert_eq!(p1.permute(12345), p1b.permute(12345));
        assert_ne!(p1.permute(12345), p2.permute(12345));
    }

    #[test]
    fn key_parsing() {
        let hex_key = "00".repeat(31) + "ff";
        let k = AnonymizationKey::from_hex(&hex_key).unwrap();
        assert_eq!(k.0[31], 0xff);
        assert!(matches!(AnonymizationKey::from_hex("abcd"), Err(KeyError::Length(2))));
        assert!(AnonymizationKey::from_hex("zz").is_err());
        assert_eq!(format!("{k:?}"), "AnonymizationKey(..)");

        let dir = tempfile::tempdir().unwrap();
        let hex_path = dir.path().join("k.hex");
        std::fs::write(&hex_path, format!("{hex_key}\n")).unwrap();
        assert_eq!(AnonymizationKey::from_file(&hex_path).unwrap(), k);
        let raw_path = dir.path().join("k.bin");
        std::fs::write(&raw_path, [0x80u8; 32]).unwrap();
        assert_eq!(AnonymizationKey::from_file(&raw_path).unwrap(), AnonymizationKey::from_bytes([0x80; 32]));
    }

    proptest! {
        #[test]
        fn anonymize_preserves_aggregates(
            entries in prop::collection::btree_map((0u128..50, 0u128..50), 1u64..20, 1..100),
            seed in any::<u8>(),
        ) {
            let m = TrafficMatrix::from_entries(entries.into_iter().map(|((s, d), c)| (s, d, c)), 0, (0, 0), None).unwrap();
            let a = anonymize(&m, &key(seed));
            prop_assert_eq!(aggregates(&a), aggregates(&m));
            let (dv, da) = (degree_vectors(&m), degree_vectors(&a));
            for q in crate::matrix::DegreeQuantity::ALL {
                let mut x = dv.values(q);
                let mut y = da.values(q);
                x.sort_unstable();
                y.sort_unstable();
                prop_assert_eq!(x, y);
            }
        }
    }
}
