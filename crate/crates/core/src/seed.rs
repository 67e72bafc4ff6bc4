//! Hash-based stream splitting.
//!
//! A stream is identified by a master seed and an ordered list of labels. The
//! key is the SHA-256 digest of a length-prefixed encoding of both, so the
//! mapping is stable across versions, sensitive to label order, and
//! collision resistant. Streams are ChaCha8 generators keyed by the digest;
//! ChaCha is itself counter based, so a stream never overlaps another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator type owned by every independent unit of work.
pub type StreamRng = ChaCha8Rng;

const DOMAIN: &[u8] = b"superenv/stream/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(v: u64) -> Self {
        Label::Int(v)
    }
}

impl From<usize> for Label<'_> {
    fn from(v: usize) -> Self {
        Label::Int(v as u64)
    }
}

impl From<u32> for Label<'_> {
    fn from(v: u32) -> Self {
        Label::Int(u64::from(v))
    }
}

/// Full 256-bit key for `(master, labels)`.
pub fn derive_key(master: u64, labels: &[Label<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN);
    hasher.update(master.to_le_bytes());
    hasher.update((labels.len() as u64).to_le_bytes());
    for label in labels {
        match label {
            Label::Str(s) => {
                hasher.update([1u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Label::Int(v) => {
                hasher.update([2u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

/// 64-bit stream seed: the first eight bytes of [`derive_key`], little endian.
pub fn derive_seed(master: u64, labels: &[Label<'_>]) -> u64 {
    let key = derive_key(master, labels);
    u64::from_le_bytes(key[..8].try_into().expect("eight bytes"))
}

/// Generator for `(master, labels)`.
pub fn stream(master: u64, labels: &[Label<'_>]) -> StreamRng {
    ChaCha8Rng::from_seed(derive_key(master, labels))
}

/// Shorthand for the common `(tag, index)` label pair.
pub fn substream(master: u64, tag: &str, index: u64) -> StreamRng {
    stream(master, &[Label::Str(tag), Label::Int(index)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;
    use std::collections::HashSet;

    #[test]
    fn same_inputs_same_seed() {
        let a = derive_seed(7, &["replica".into(), 3u64.into()]);
        let b = derive_seed(7, &["replica".into(), 3u64.into()]);
        assert_eq!(a, b);
    }

    #[test]
    fn label_order_matters() {
        let a = derive_seed(7, &["a".into(), "b".into()]);
        let b = derive_seed(7, &["b".into(), "a".into()]);
        assert_ne!(a, b);
        let c = derive_seed(7, &[1u64.into(), 2u64.into()]);
        let d = derive_seed(7, &[2u64.into(), 1u64.into()]);
        assert_ne!(c, d);
    }

    #[test]
    fn string_and_integer_labels_do_not_alias() {
        assert_ne!(derive_seed(0, &["1".into()]), derive_seed(0, &[1u64.into()]));
        // length prefixing keeps concatenations apart
        assert_ne!(
            derive_seed(0, &["ab".into(), "c".into()]),
            derive_seed(0, &["a".into(), "bc".into()])
        );
    }

    #[test]
    fn no_collisions_over_a_million_replica_ids() {
        let mut seen = HashSet::with_capacity(1 << 21);
        for id in 0..1_000_000u64 {
            assert!(seen.insert(derive_seed(42, &["replica".into(), id.into()])), "collision at {id}");
        }
    }

    #[test]
    fn streams_reproduce_bitwise() {
        let mut a = substream(9, "x", 1);
        let mut b = substream(9, "x", 1);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = substream(9, "x", 2);
        assert_ne!(substream(9, "x", 1).next_u64(), c.next_u64());
    }

    #[test]
    fn derivation_is_stable_across_versions() {
        // Frozen value: changing the encoding breaks replay of stored runs.
        let key = derive_key(0, &[]);
        let mut hasher = Sha256::new();
        hasher.update(b"superenv/stream/v1");
        hasher.update(0u64.to_le_bytes());
        hasher.update(0u64.to_le_bytes());
        assert_eq!(key.as_slice(), hasher.finalize().as_slice());
        assert_eq!(derive_seed(42, &["replica".into(), 7u64.into()]), 4660228018842329058);
    }
}
