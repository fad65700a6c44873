//! Canonical binary encoding used for everything that is hashed, signed or
//! carried across an enclave boundary.
//!
//! The format is bincode 1.x with its default options: little-endian
//! fixed-width integers, `u64` length prefixes for sequences, strings and maps,
//! `u32` enum variant indices and fields in declaration order. Maps are always
//! `BTreeMap`, so iteration order (and therefore the bytes) is deterministic.
//! See `docs/encoding.md` for the byte-level layout.

use bincode::Options;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("canonical decoding failed: {0}")]
pub struct DecodeError(String);

fn options() -> impl Options {
    bincode::DefaultOptions::new().with_fixint_encoding().with_little_endian().reject_trailing_bytes()
}

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    options().serialize(value).expect("in-memory canonical encoding cannot fail")
}

/// Inverse of [`encode`]; trailing bytes are an error.
pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    options().deserialize(bytes).map_err(|e| DecodeError(e.to_string()))
}

pub fn digest<T: Serialize + ?Sized>(value: &T) -> crate::crypto::Digest {
    crate::crypto::hash(&encode(value))
}

impl DecodeError {
    pub(crate) fn truncated() -> Self {
        DecodeError("truncated input".into())
    }
}
